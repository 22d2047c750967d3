use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB raster in `[0, 1]`, channel-major (`C×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::shape(format!(
                "{} values do not form a 3×{height}×{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("image values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); CHANNELS * height * width],
        }
    }

    /// Builds an image from `f(channel, row, col)`, clamping to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for r in 0..height {
                for col in 0..width {
                    data.push(f(c, r, col).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Applies `f` to every value and clamps the result to `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Rebuilds an image from three planes, clamping to `[0, 1]`.
    pub fn from_planes(height: usize, width: usize, planes: [Vec<f64>; CHANNELS]) -> Image {
        let data = planes
            .into_iter()
            .flatten()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Image { height, width, data }
    }

    pub fn planes(&self) -> [Vec<f64>; CHANNELS] {
        [0, 1, 2].map(|c| self.plane(c).to_vec())
    }

    /// ITU-R BT.601 luma.
    pub fn luma(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn flip_horizontal(&self) -> Image {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; self.data.len()];
        for c in 0..CHANNELS {
            for r in 0..h {
                for col in 0..w {
                    data[(c * h + r) * w + col] = self.data[(c * h + r) * w + (w - 1 - col)];
                }
            }
        }
        Image { height: h, width: w, data }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Single-channel H×W float map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Map {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values do not form a {height}×{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Map {
        Map::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }
}

/// Soft blending mask `M`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendMask(Map);

impl BlendMask {
    /// Wraps a map, clamping values into `[0, 1]`.
    pub fn new(map: Map) -> Self {
        BlendMask(map.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        BlendMask::new(Map::filled(height, width, value))
    }

    pub fn map(&self) -> &Map {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }
}

/// Blending boundary `B = 4·M⊙(1−M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMap(Map);

impl BoundaryMap {
    /// Wraps a map that already holds boundary intensities (e.g. one read back
    /// from disk or rescaled for analysis). Values must be non-negative.
    pub fn from_map(map: Map) -> Result<Self> {
        if map.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("boundary values must be finite and non-negative".into()));
        }
        Ok(BoundaryMap(map))
    }

    pub fn map(&self) -> &Map {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn max(&self) -> f64 {
        self.0.max()
    }
}

/// Facial landmarks in pixel coordinates (x = column, y = row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
    height: usize,
    width: usize,
}

pub const LANDMARK_COUNTS: [usize; 2] = [68, 81];

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, height: usize, width: usize) -> Result<Self> {
        if !LANDMARK_COUNTS.contains(&points.len()) {
            return Err(Error::Data(format!(
                "expected 68 or 81 landmarks, got {}",
                points.len()
            )));
        }
        Self::unchecked_count(points, height, width)
    }

    /// Like [`LandmarkSet::new`] but accepts any point count. Hull masks and
    /// affine fits work on arbitrary point sets.
    pub fn unchecked_count(points: Vec<[f64; 2]>, height: usize, width: usize) -> Result<Self> {
        let inside = |p: &[f64; 2]| {
            p[0].is_finite()
                && p[1].is_finite()
                && (0.0..=(width as f64 - 1.0)).contains(&p[0])
                && (0.0..=(height as f64 - 1.0)).contains(&p[1])
        };
        if let Some(p) = points.iter().find(|p| !inside(p)) {
            return Err(Error::Data(format!(
                "landmark ({}, {}) lies outside the {height}×{width} image",
                p[0], p[1]
            )));
        }
        Ok(Self { points, height, width })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Bilinear sample of an H×W plane at (x, y); coordinates outside the frame
/// are clamped to the edge.
pub fn sample_bilinear(plane: &[f64], height: usize, width: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, c: usize| plane[r * width + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Normalized 1-d Gaussian kernel of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable convolution of an H×W plane with a symmetric 1-d kernel,
/// edge-clamped.
pub fn convolve_separable(plane: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for r in 0..height {
        for c in 0..width {
            tmp[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * plane[r * width + clamp(c as isize + i as isize - half, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(r as isize + i as isize - half, height) * width + c])
                .sum();
        }
    }
    out
}

/// Gaussian sigma conventionally paired with a kernel size.
pub fn sigma_for_kernel(size: usize) -> f64 {
    0.3 * ((size as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn landmarks_must_be_inside_and_counted() {
        let pts = vec![[1.0, 1.0]; 68];
        assert!(LandmarkSet::new(pts.clone(), 4, 4).is_ok());
        assert!(LandmarkSet::new(pts[..10].to_vec(), 4, 4).is_err());
        let mut bad = pts;
        bad[3] = [4.5, 1.0];
        assert!(LandmarkSet::new(bad, 4, 4).is_err());
    }

    #[test]
    fn bilinear_hits_grid_points_exactly() {
        let plane: Vec<f64> = (0..12).map(|v| v as f64 * 0.1).collect();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(sample_bilinear(&plane, 3, 4, c as f64, r as f64), plane[r * 4 + c]);
            }
        }
        assert_eq!(sample_bilinear(&plane, 3, 4, -5.0, -5.0), plane[0]);
        let mid = sample_bilinear(&plane, 3, 4, 0.5, 0.0);
        assert!((mid - 0.05).abs() < 1e-15);
    }

    #[test]
    fn blur_preserves_constants() {
        let plane = vec![0.4; 25];
        let k = gaussian_kernel(5, sigma_for_kernel(5));
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let out = convolve_separable(&plane, 5, 5, &k);
        assert!(out.iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Image::from_fn(3, 5, |c, r, col| (c * 15 + r * 5 + col) as f64 / 45.0);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(1, 2, 0), img.get(1, 2, 4));
    }
}
