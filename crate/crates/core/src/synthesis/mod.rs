//! Pseudo-fake synthesis: landmark hull masks, mask deformation, blending
//! and the blending boundary, plus a procedural toy-face corpus.

mod blend;
mod hull;
mod image;
pub mod io;
mod toy;

pub use blend::{
    blend, blending_boundary, deform_mask, fit_affine, make_cross_blended, make_self_blended, warp_affine, Affine,
    DeformParams, Photometric, Provenance, PseudoFake, SelfBlendDraw, Shift, SynthMode, SynthParams,
};
pub use hull::{convex_hull, convex_hull_mask, hull_contains};
pub use image::{
    convolve_separable, gaussian_kernel, sample_bilinear, sigma_for_kernel, BlendMask, BoundaryMap, Image,
    LandmarkSet, Map, CHANNELS, LANDMARK_COUNTS,
};
pub use toy::gen_toy_face;
