//! Mask deformation, blending and pseudo-fake construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::hull::convex_hull_mask;
use super::image::{
    convolve_separable, gaussian_kernel, sample_bilinear, sigma_for_kernel, BlendMask, BoundaryMap, Image,
    LandmarkSet, Map, CHANNELS,
};
use crate::error::{Error, Result};
use crate::rng;

/// Random deformation applied to a binary hull mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformParams {
    /// Maximum absolute translation per axis, pixels.
    pub max_translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum magnitude of the smooth elastic displacement field, pixels.
    pub elastic_max: f64,
    /// Side of the coarse control grid the elastic field is interpolated from.
    pub elastic_grid: usize,
    /// Candidate (odd) Gaussian blur kernel sizes; 1 disables blurring.
    pub blur_kernels: Vec<usize>,
}

impl Default for DeformParams {
    fn default() -> Self {
        Self {
            max_translate: 4.0,
            scale_min: 0.95,
            scale_max: 1.05,
            elastic_max: 2.0,
            elastic_grid: 6,
            blur_kernels: vec![5, 7, 9, 11, 13, 15],
        }
    }
}

impl DeformParams {
    pub fn identity() -> Self {
        Self {
            max_translate: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            elastic_max: 0.0,
            elastic_grid: 4,
            blur_kernels: vec![1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_translate >= 0.0
            && self.elastic_max >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.elastic_grid >= 2
            && !self.blur_kernels.is_empty()
            && self.blur_kernels.iter().all(|k| k % 2 == 1);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mask deformation parameters {self:?}")))
        }
    }
}

/// Synthesis parameters shared by the self- and cross-blending paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub deform: DeformParams,
    /// Additive brightness jitter bound.
    pub brightness: f64,
    /// Relative contrast jitter bound.
    pub contrast: f64,
    /// Hue rotation bound, as a fraction of a half turn.
    pub hue: f64,
    /// Maximum source translation for self-blending, pixels.
    pub max_shift: f64,
    /// Maximum relative source resize for self-blending.
    pub max_resize: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            deform: DeformParams::default(),
            brightness: 0.1,
            contrast: 0.1,
            hue: 0.1,
            max_shift: 3.0,
            max_resize: 0.02,
        }
    }
}

impl SynthParams {
    pub fn identity() -> Self {
        Self {
            deform: DeformParams::identity(),
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
            max_shift: 0.0,
            max_resize: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.deform.validate()?;
        let bounds = [self.brightness, self.contrast, self.hue, self.max_shift, self.max_resize];
        if bounds.iter().any(|b| !b.is_finite() || *b < 0.0) || self.contrast >= 1.0 || self.max_resize >= 1.0 {
            return Err(Error::Config(format!("invalid synthesis parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    /// Self-blending: two differently transformed copies of one image.
    Sbi,
    /// Cross-identity blending: another face warped onto the target.
    Bi,
}

/// `M⊙fg + (1−M)⊙bg` per channel.
pub fn blend(fg: &Image, bg: &Image, mask: &BlendMask) -> Result<Image> {
    if !fg.same_dims(bg) || fg.height() != mask.height() || fg.width() != mask.width() {
        return Err(Error::shape(format!(
            "blend: fg {}×{}, bg {}×{}, mask {}×{}",
            fg.height(),
            fg.width(),
            bg.height(),
            bg.width(),
            mask.height(),
            mask.width()
        )));
    }
    let n = fg.height() * fg.width();
    let m = mask.data();
    let mut data = Vec::with_capacity(CHANNELS * n);
    for (i, (&f, &b)) in fg.data().iter().zip(bg.data()).enumerate() {
        let w = m[i % n];
        // Rounding can push the combination an ulp outside [min, max].
        data.push((w * f + (1.0 - w) * b).clamp(f.min(b), f.max(b)));
    }
    Image::new(fg.height(), fg.width(), data)
}

/// `B = 4·M⊙(1−M)`.
pub fn blending_boundary(mask: &BlendMask) -> BoundaryMap {
    BoundaryMap::from_map(mask.map().map(|m| 4.0 * m * (1.0 - m))).expect("mask values lie in [0, 1]")
}

/// Smooth random displacement field: control vectors drawn uniformly from
/// the disc of radius `max_mag` on a `grid`×`grid` lattice, bilinearly
/// interpolated, so no pixel moves further than `max_mag`.
fn elastic_field(rng: &mut rng::Rng, h: usize, w: usize, grid: usize, max_mag: f64) -> (Vec<f64>, Vec<f64>) {
    let mut cx = Vec::with_capacity(grid * grid);
    let mut cy = Vec::with_capacity(grid * grid);
    for _ in 0..grid * grid {
        let radius = max_mag * rng.random::<f64>().sqrt();
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        cx.push(radius * angle.cos());
        cy.push(radius * angle.sin());
    }
    let sx = (grid - 1) as f64 / (w.max(2) - 1) as f64;
    let sy = (grid - 1) as f64 / (h.max(2) - 1) as f64;
    let mut dx = vec![0.0; h * w];
    let mut dy = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (gx, gy) = (c as f64 * sx, r as f64 * sy);
            dx[r * w + c] = sample_bilinear(&cx, grid, grid, gx, gy);
            dy[r * w + c] = sample_bilinear(&cy, grid, grid, gx, gy);
        }
    }
    (dx, dy)
}

/// Affine jitter, elastic displacement and Gaussian blur of a hull mask.
pub fn deform_mask(mask: &BlendMask, rng: &mut rng::Rng, params: &DeformParams) -> BlendMask {
    let (h, w) = (mask.height(), mask.width());
    let tx = rng.random_range(-params.max_translate..=params.max_translate);
    let ty = rng.random_range(-params.max_translate..=params.max_translate);
    let scale = rng.random_range(params.scale_min..=params.scale_max);
    let (dx, dy) = if params.elastic_max > 0.0 {
        elastic_field(rng, h, w, params.elastic_grid, params.elastic_max)
    } else {
        (vec![0.0; h * w], vec![0.0; h * w])
    };
    let k = params.blur_kernels[rng.random_range(0..params.blur_kernels.len())];

    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = mask.data();
    let mut warped = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let x = c as f64 + dx[r * w + c];
            let y = r as f64 + dy[r * w + c];
            let sx = cx + (x - cx - tx) / scale;
            let sy = cy + (y - cy - ty) / scale;
            warped.push(sample_bilinear(src, h, w, sx, sy));
        }
    }
    let out = if k > 1 {
        convolve_separable(&warped, h, w, &gaussian_kernel(k, sigma_for_kernel(k)))
    } else {
        warped
    };
    BlendMask::new(Map::new(h, w, out).expect("dims preserved"))
}

/// Per-copy colour perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
    /// Hue rotation, radians.
    pub hue: f64,
}

impl Photometric {
    pub const IDENTITY: Photometric = Photometric {
        brightness: 0.0,
        contrast: 1.0,
        hue: 0.0,
    };

    pub fn sample(rng: &mut rng::Rng, params: &SynthParams) -> Self {
        Self {
            brightness: rng.random_range(-params.brightness..=params.brightness),
            contrast: 1.0 + rng.random_range(-params.contrast..=params.contrast),
            hue: std::f64::consts::PI * rng.random_range(-params.hue..=params.hue),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        if *self == Self::IDENTITY {
            return img.clone();
        }
        let [r, g, b] = img.planes();
        let n = r.len();
        let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
        // Rotation about the grey axis.
        let (cos, sin) = (self.hue.cos(), self.hue.sin());
        let k = (1.0 - cos) / 3.0;
        let s = sin / 3f64.sqrt();
        let rot = [
            [cos + k, k - s, k + s],
            [k + s, cos + k, k - s],
            [k - s, k + s, cos + k],
        ];
        let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            let px = [r[i], g[i], b[i]];
            for (c, plane) in planes.iter_mut().enumerate() {
                let v: f64 = (0..3).map(|j| rot[c][j] * px[j]).sum();
                plane[i] = (v - mean) * self.contrast + mean + self.brightness;
            }
        }
        Image::from_planes(img.height(), img.width(), planes)
    }
}

/// Translation plus isotropic resize about the image centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
}

impl Shift {
    pub const IDENTITY: Shift = Shift {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
    };

    pub fn apply(&self, img: &Image) -> Image {
        if *self == Self::IDENTITY {
            return img.clone();
        }
        let (h, w) = (img.height(), img.width());
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let planes = [0, 1, 2].map(|c| {
            let p = img.plane(c);
            let mut out = Vec::with_capacity(h * w);
            for r in 0..h {
                for col in 0..w {
                    let sx = cx + (col as f64 - cx - self.dx) / self.scale;
                    let sy = cy + (r as f64 - cy - self.dy) / self.scale;
                    out.push(sample_bilinear(p, h, w, sx, sy));
                }
            }
            out
        });
        Image::from_planes(h, w, planes)
    }
}

/// The random draws that define one self-blended sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfBlendDraw {
    pub source: Photometric,
    pub target: Photometric,
    pub shift: Shift,
}

impl SelfBlendDraw {
    pub const IDENTITY: SelfBlendDraw = SelfBlendDraw {
        source: Photometric::IDENTITY,
        target: Photometric::IDENTITY,
        shift: Shift::IDENTITY,
    };

    pub fn sample(rng: &mut rng::Rng, params: &SynthParams) -> Self {
        let source = Photometric::sample(rng, params);
        let target = Photometric::sample(rng, params);
        let shift = Shift {
            dx: rng.random_range(-params.max_shift..=params.max_shift),
            dy: rng.random_range(-params.max_shift..=params.max_shift),
            scale: 1.0 + rng.random_range(-params.max_resize..=params.max_resize),
        };
        Self { source, target, shift }
    }

    /// Blends the transformed source copy onto the transformed target copy.
    pub fn apply(&self, img: &Image, mask: &BlendMask) -> Result<Image> {
        let source = self.shift.apply(&self.source.apply(img));
        let target = self.target.apply(img);
        blend(&source, &target, mask)
    }
}

/// Where a pseudo-fake came from; enough to regenerate it bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: SynthMode,
    pub seed: u64,
    pub params: SynthParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoFake {
    pub image: Image,
    pub mask: BlendMask,
    pub boundary: BoundaryMap,
    pub provenance: Provenance,
}

/// Self-blended pseudo-fake built from a single real face.
pub fn make_self_blended(img: &Image, lms: &LandmarkSet, seed: u64, params: &SynthParams) -> Result<PseudoFake> {
    check_frame(img, lms)?;
    let mut rng = rng::seeded(seed);
    let hull = convex_hull_mask(lms)?;
    let mask = deform_mask(&hull, &mut rng, &params.deform);
    let draw = SelfBlendDraw::sample(&mut rng, params);
    let image = draw.apply(img, &mask)?;
    Ok(PseudoFake {
        image,
        boundary: blending_boundary(&mask),
        mask,
        provenance: Provenance {
            mode: SynthMode::Sbi,
            seed,
            params: params.clone(),
        },
    })
}

fn check_frame(img: &Image, lms: &LandmarkSet) -> Result<()> {
    if img.height() != lms.height() || img.width() != lms.width() {
        return Err(Error::shape(format!(
            "landmarks refer to a {}×{} frame but the image is {}×{}",
            lms.height(),
            lms.width(),
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// 2×3 affine map `[x', y'] = A·[x, y, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let a = &self.0;
        [
            a[0][0] * p[0] + a[0][1] * p[1] + a[0][2],
            a[1][0] * p[0] + a[1][1] * p[1] + a[1][2],
        ]
    }

    pub fn inverse(&self) -> Result<Affine> {
        let [[a, b, c], [d, e, f]] = self.0;
        let det = a * e - b * d;
        if det.abs() < 1e-12 {
            return Err(Error::Synthesis("affine map is not invertible".into()));
        }
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Affine([
            [ia, ib, -(ia * c + ib * f)],
            [id, ie, -(id * c + ie * f)],
        ]))
    }

    pub fn max_abs_diff(&self, other: &Affine) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Solves a 3×3 system by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut rhs: [f64; 3], scale: f64) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() <= 1e-10 * scale {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - tail) / m[row][row];
    }
    Some(x)
}

/// Least-squares affine map taking `src` points onto `dst` points.
pub fn fit_affine(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Affine> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::Synthesis(format!(
            "affine fit needs ≥3 matched points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    // Centre the source points for conditioning.
    let n = src.len() as f64;
    let mx = src.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = src.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut normal = [[0.0; 3]; 3];
    let mut rx = [0.0; 3];
    let mut ry = [0.0; 3];
    for (s, d) in src.iter().zip(dst) {
        let row = [s[0] - mx, s[1] - my, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                normal[i][j] += row[i] * row[j];
            }
            rx[i] += row[i] * d[0];
            ry[i] += row[i] * d[1];
        }
    }
    let scale = normal.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let degenerate = || Error::Synthesis("landmark fit is rank deficient".into());
    let u = solve3(normal, rx, scale).ok_or_else(degenerate)?;
    let v = solve3(normal, ry, scale).ok_or_else(degenerate)?;
    // Undo the centring: x' = u0 (x − mx) + u1 (y − my) + u2.
    Ok(Affine([
        [u[0], u[1], u[2] - u[0] * mx - u[1] * my],
        [v[0], v[1], v[2] - v[0] * mx - v[1] * my],
    ]))
}

/// Resamples `img` so that source point `p` lands at `map(p)`.
pub fn warp_affine(img: &Image, map: &Affine) -> Result<Image> {
    let inv = map.inverse()?;
    let (h, w) = (img.height(), img.width());
    let planes = [0, 1, 2].map(|c| {
        let p = img.plane(c);
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for col in 0..w {
                let [sx, sy] = inv.apply([col as f64, r as f64]);
                out.push(sample_bilinear(p, h, w, sx, sy));
            }
        }
        out
    });
    Ok(Image::from_planes(h, w, planes))
}

/// Cross-identity pseudo-fake: `fg` is aligned to `bg` by its landmarks and
/// blended into `bg` through `bg`'s deformed hull mask.
pub fn make_cross_blended(
    fg: &Image,
    fg_lms: &LandmarkSet,
    bg: &Image,
    bg_lms: &LandmarkSet,
    seed: u64,
    params: &SynthParams,
) -> Result<PseudoFake> {
    check_frame(fg, fg_lms)?;
    check_frame(bg, bg_lms)?;
    if !fg.same_dims(bg) {
        return Err(Error::shape("cross-blending needs equally sized images"));
    }
    let map = fit_affine(fg_lms.points(), bg_lms.points())?;
    let aligned = warp_affine(fg, &map)?;
    let mut rng = rng::seeded(seed);
    let mask = deform_mask(&convex_hull_mask(bg_lms)?, &mut rng, &params.deform);
    let image = blend(&aligned, bg, &mask)?;
    Ok(PseudoFake {
        image,
        boundary: blending_boundary(&mask),
        mask,
        provenance: Provenance {
            mode: SynthMode::Bi,
            seed,
            params: params.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::toy::gen_toy_face;
    use rand::SeedableRng;

    fn gradient_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |c, r, col| ((c + 1) * (r * w + col)) as f64 / (3 * h * w) as f64)
    }

    #[test]
    fn blend_identities() {
        let fg = gradient_image(6, 5);
        let bg = fg.flip_horizontal().map(|v| 1.0 - v);
        assert_eq!(blend(&fg, &bg, &BlendMask::filled(6, 5, 1.0)).unwrap(), fg);
        assert_eq!(blend(&fg, &bg, &BlendMask::filled(6, 5, 0.0)).unwrap(), bg);
        let half = blend(
            &Image::filled(6, 5, 1.0),
            &Image::filled(6, 5, 0.0),
            &BlendMask::filled(6, 5, 0.5),
        )
        .unwrap();
        assert!(half.data().iter().all(|&v| v == 0.5));
        assert!(blend(&fg, &Image::filled(5, 5, 0.0), &BlendMask::filled(6, 5, 0.0)).is_err());
    }

    #[test]
    fn boundary_values() {
        let at = |m: f64| blending_boundary(&BlendMask::filled(1, 1, m)).data()[0];
        assert_eq!(at(0.5), 1.0);
        assert_eq!(at(0.0), 0.0);
        assert_eq!(at(1.0), 0.0);
        assert_eq!(at(0.25), 0.75);
    }

    #[test]
    fn identity_deformation_is_exact() {
        let (img, lms) = gen_toy_face(3, 48);
        let hull = convex_hull_mask(&lms).unwrap();
        let mut rng = rng::seeded(1);
        let out = deform_mask(&hull, &mut rng, &DeformParams::identity());
        assert_eq!(out, hull);
        let _ = img;
    }

    #[test]
    fn deformation_is_seeded_and_bounded() {
        let (_, lms) = gen_toy_face(5, 64);
        let hull = convex_hull_mask(&lms).unwrap();
        let params = DeformParams::default();
        let a = deform_mask(&hull, &mut rng::seeded(9), &params);
        let b = deform_mask(&hull, &mut rng::seeded(9), &params);
        assert_eq!(a, b);
        let base = hull.map().sum();
        for seed in 0..100 {
            let m = deform_mask(&hull, &mut rng::seeded(seed), &params);
            assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let ratio = m.map().sum() / base;
            assert!((0.8..=1.2).contains(&ratio), "seed {seed}: {ratio}");
            assert!(m.data().iter().any(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn self_blend_identity_with_empty_mask_returns_input() {
        let img = gradient_image(8, 8);
        let out = SelfBlendDraw::IDENTITY.apply(&img, &BlendMask::filled(8, 8, 0.0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn self_blend_is_deterministic_and_has_soft_boundary() {
        let (img, lms) = gen_toy_face(11, 64);
        let params = SynthParams::default();
        let a = make_self_blended(&img, &lms, 42, &params).unwrap();
        let b = make_self_blended(&img, &lms, 42, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.boundary.max() <= 1.0);
        assert!(a.boundary.max() > 0.0);
        assert_ne!(a.image, img);
    }

    #[test]
    fn affine_fit_recovers_identity_and_random_maps() {
        let (_, lms) = gen_toy_face(2, 64);
        let fit = fit_affine(lms.points(), lms.points()).unwrap();
        assert!(fit.max_abs_diff(&Affine::IDENTITY) <= 1e-10);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let a = Affine([
                [rng.random_range(0.8..1.2), rng.random_range(-0.2..0.2), rng.random_range(-5.0..5.0)],
                [rng.random_range(-0.2..0.2), rng.random_range(0.8..1.2), rng.random_range(-5.0..5.0)],
            ]);
            let moved: Vec<[f64; 2]> = lms.points().iter().map(|&p| a.apply(p)).collect();
            let fit = fit_affine(lms.points(), &moved).unwrap();
            assert!(fit.max_abs_diff(&a) <= 1e-8, "{fit:?} vs {a:?}");
        }
    }

    #[test]
    fn affine_fit_rejects_collinear_points() {
        let pts: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 2.0 * i as f64]).collect();
        assert!(matches!(fit_affine(&pts, &pts), Err(Error::Synthesis(_))));
    }

    #[test]
    fn cross_blend_of_identical_faces_is_the_background() {
        let (img, lms) = gen_toy_face(4, 64);
        let fake = make_cross_blended(&img, &lms, &img, &lms, 3, &SynthParams::default()).unwrap();
        assert!(fake.image.max_abs_diff(&img) <= 1e-6);
        assert_eq!(fake.provenance.mode, SynthMode::Bi);
    }

    #[test]
    fn cross_blend_mixes_two_faces() {
        let (fg, fg_lms) = gen_toy_face(4, 64);
        let (bg, bg_lms) = gen_toy_face(5, 64);
        let fake = make_cross_blended(&fg, &fg_lms, &bg, &bg_lms, 3, &SynthParams::default()).unwrap();
        assert!(fake.image.max_abs_diff(&bg) > 0.01);
        assert!(fake.boundary.max() > 0.0);
    }
}
