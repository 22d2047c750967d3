//! Training-time image augmentation.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::synthesis::{convolve_separable, gaussian_kernel, sample_bilinear, sigma_for_kernel, Image, Photometric, Shift};

use super::TrainSample;

/// Probability of applying each augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub color: f64,
    pub crop: f64,
    pub scale: f64,
    pub flip: f64,
    pub noise: f64,
    pub blur: f64,
    pub jpeg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            color: 0.3,
            crop: 0.3,
            scale: 0.3,
            flip: 0.5,
            noise: 0.2,
            blur: 0.1,
            jpeg: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            color: 0.0,
            crop: 0.0,
            scale: 0.0,
            flip: 0.0,
            noise: 0.0,
            blur: 0.0,
            jpeg: 0.0,
        }
    }

    pub fn probabilities(&self) -> [f64; 7] {
        [self.color, self.crop, self.scale, self.flip, self.noise, self.blur, self.jpeg]
    }
}

/// Crops a random window of at least `min_area` of the image and resizes it
/// back to the original size.
pub fn crop_resize(img: &Image, r: &mut rng::Rng, min_area: f64) -> Image {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let frac = r.random_range(min_area..=1.0).sqrt();
    let (ch, cw) = (h * frac, w * frac);
    let top = r.random_range(0.0..=h - ch);
    let left = r.random_range(0.0..=w - cw);
    let planes = [0, 1, 2].map(|c| {
        let p = img.plane(c);
        let mut out = Vec::with_capacity(img.height() * img.width());
        for row in 0..img.height() {
            for col in 0..img.width() {
                let y = top + (row as f64 + 0.5) * ch / h - 0.5;
                let x = left + (col as f64 + 0.5) * cw / w - 0.5;
                out.push(sample_bilinear(p, img.height(), img.width(), x, y));
            }
        }
        out
    });
    Image::from_planes(img.height(), img.width(), planes)
}

pub fn gaussian_noise(img: &Image, r: &mut rng::Rng, sigma: f64) -> Image {
    let normal = Normal::new(0.0, sigma).expect("non-negative sigma");
    let (h, w) = (img.height(), img.width());
    let noisy: Vec<f64> = img.data().iter().map(|v| v + normal.sample(r)).collect();
    Image::from_fn(h, w, |c, row, col| noisy[(c * h + row) * w + col])
}

pub fn gaussian_blur(img: &Image, size: usize) -> Image {
    let k = gaussian_kernel(size, sigma_for_kernel(size));
    let (h, w) = (img.height(), img.width());
    Image::from_planes(h, w, img.planes().map(|p| convolve_separable(&p, h, w, &k)))
}

const JPEG_LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    b
}

/// JPEG-style compression: each channel is cut into 8×8 blocks whose DCT
/// coefficients are quantized with the standard luminance table scaled for
/// `quality` (1–100). Pixels outside whole blocks are left as they are.
pub fn jpeg_like(img: &Image, quality: u32) -> Image {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 50.0 / q } else { 2.0 - q / 50.0 };
    let table: Vec<f64> = JPEG_LUMA_TABLE.iter().map(|t| (t * scale).round().max(1.0)).collect();
    let basis = dct_basis();
    let (h, w) = (img.height(), img.width());
    let planes = img.planes().map(|mut p| {
        for by in 0..h / 8 {
            for bx in 0..w / 8 {
                let mut block = [[0.0; 8]; 8];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = p[(by * 8 + i) * w + bx * 8 + j] * 255.0 - 128.0;
                    }
                }
                let mut coef = [[0.0; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for i in 0..8 {
                            for j in 0..8 {
                                s += basis[u][i] * basis[v][j] * block[i][j];
                            }
                        }
                        let t = table[u * 8 + v];
                        coef[u][v] = (s / t).round() * t;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += basis[u][i] * basis[v][j] * coef[u][v];
                            }
                        }
                        p[(by * 8 + i) * w + bx * 8 + j] = (s + 128.0) / 255.0;
                    }
                }
            }
        }
        p
    });
    Image::from_planes(h, w, planes)
}

/// Applies each augmentation independently with its configured probability.
/// Only the flip touches the target heatmap.
pub fn augment(mut sample: TrainSample, r: &mut rng::Rng, cfg: &AugmentConfig) -> TrainSample {
    let hit = |r: &mut rng::Rng, p: f64| p > 0.0 && r.random::<f64>() < p;
    if hit(r, cfg.color) {
        let jitter = Photometric {
            brightness: r.random_range(-0.1..=0.1),
            contrast: 1.0 + r.random_range(-0.1..=0.1),
            hue: std::f64::consts::PI * r.random_range(-0.03..=0.03),
        };
        sample.image = jitter.apply(&sample.image);
    }
    if hit(r, cfg.crop) {
        sample.image = crop_resize(&sample.image, r, 0.9);
    }
    if hit(r, cfg.scale) {
        let s = Shift {
            dx: 0.0,
            dy: 0.0,
            scale: r.random_range(0.95..=1.05),
        };
        sample.image = s.apply(&sample.image);
    }
    if hit(r, cfg.flip) {
        sample.image = sample.image.flip_horizontal();
        sample.target = sample.target.flip_horizontal();
    }
    if hit(r, cfg.noise) {
        let sigma = r.random_range(0.0..=0.02);
        sample.image = gaussian_noise(&sample.image, r, sigma);
    }
    if hit(r, cfg.blur) {
        let size = if r.random::<bool>() { 3 } else { 5 };
        sample.image = gaussian_blur(&sample.image, size);
    }
    if hit(r, cfg.jpeg) {
        let quality = r.random_range(60..=95);
        sample.image = jpeg_like(&sample.image, quality);
    }
    sample
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Label;
    use crate::vulnerability::{gaussian_map, PatchCoord};
    use rand::SeedableRng;

    fn sample() -> TrainSample {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        TrainSample {
            image: Image::from_fn(32, 32, |_, _, _| r.random()),
            label: Label::Fake,
            target: gaussian_map(PatchCoord::new(1, 2), 4, 1.0).unwrap(),
            source_id: "x".into(),
        }
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let s = sample();
        let out = augment(s.clone(), &mut rng::seeded(1), &AugmentConfig::none());
        assert_eq!(out, s);
    }

    #[test]
    fn flip_is_an_involution_and_moves_columns() {
        let s = sample();
        let cfg = AugmentConfig {
            flip: 1.0,
            ..AugmentConfig::none()
        };
        let once = augment(s.clone(), &mut rng::seeded(1), &cfg);
        let twice = augment(once.clone(), &mut rng::seeded(2), &cfg);
        assert_eq!(twice, s);
        let side = s.target.side();
        for y in 0..side {
            for x in 0..side {
                assert_eq!(once.target.at(x, y), s.target.at(side - 1 - x, y));
            }
        }
    }

    #[test]
    fn other_augmentations_keep_target_and_range() {
        let s = sample();
        for (i, _) in AugmentConfig::none().probabilities().iter().enumerate() {
            if i == 3 {
                continue;
            }
            let mut p = [0.0; 7];
            p[i] = 1.0;
            let cfg = AugmentConfig {
                color: p[0],
                crop: p[1],
                scale: p[2],
                flip: 0.0,
                noise: p[4],
                blur: p[5],
                jpeg: p[6],
            };
            let out = augment(s.clone(), &mut rng::seeded(i as u64), &cfg);
            assert_eq!(out.target, s.target);
            assert_ne!(out.image, s.image, "augmentation {i}");
            assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn jpeg_at_full_quality_is_near_lossless() {
        let s = sample();
        let out = jpeg_like(&s.image, 100);
        assert!(out.max_abs_diff(&s.image) < 1.0 / 255.0);
        let coarse = jpeg_like(&s.image, 10);
        assert!(coarse.max_abs_diff(&s.image) > 0.05);
    }
}
