//! Vulnerable patches and their Gaussian target heatmaps.
//!
//! A boundary map is cut into a √N×√N grid of P×P patches. Each patch is
//! scored by an aggregate (max by default), the highest-scoring patches are
//! the vulnerable ones, and the target heatmap places an unnormalized unit
//! Gaussian on each of them.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthesis::{io, BoundaryMap, Map};

/// Two aggregates closer than this count as tied.
pub const TIE_TOL: f64 = 1e-12;

pub const DEFAULT_SIGMA: f64 = 1.0;

/// Patch-level aggregate of boundary intensity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Max,
    Mean,
}

impl Aggregate {
    pub fn apply(self, block: &[f64]) -> f64 {
        match self {
            Aggregate::Max => block.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregate::Mean => block.iter().sum::<f64>() / block.len() as f64,
        }
    }
}

/// Free-function form of [`Aggregate::apply`].
pub fn aggregate(block: &[f64], mode: Aggregate) -> f64 {
    mode.apply(block)
}

/// Grid coordinate of a patch: `x` is the column, `y` the row, both 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchCoord {
    pub x: usize,
    pub y: usize,
}

impl PatchCoord {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// A square map cut into non-overlapping `patch`×`patch` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    patch: usize,
    side: usize,
    /// Row-major over the grid; each block row-major within the patch.
    blocks: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn block(&self, at: PatchCoord) -> &[f64] {
        &self.blocks[at.y * self.side + at.x]
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    /// Stitches the blocks back into the source map.
    pub fn assemble(&self) -> Map {
        let n = self.patch * self.side;
        Map::from_fn(n, n, |r, c| {
            let b = &self.blocks[(r / self.patch) * self.side + c / self.patch];
            b[(r % self.patch) * self.patch + c % self.patch]
        })
    }
}

pub fn patchify(map: &Map, patch: usize) -> Result<PatchGrid> {
    let (h, w) = (map.height(), map.width());
    if h != w {
        return Err(Error::shape(format!("patch grid needs a square map, got {h}×{w}")));
    }
    if patch == 0 || h % patch != 0 {
        return Err(Error::shape(format!("patch size {patch} does not divide {h}")));
    }
    let side = h / patch;
    let mut blocks = Vec::with_capacity(side * side);
    for gy in 0..side {
        for gx in 0..side {
            let mut b = Vec::with_capacity(patch * patch);
            for r in 0..patch {
                let row = (gy * patch + r) * w + gx * patch;
                b.extend_from_slice(&map.data()[row..row + patch]);
            }
            blocks.push(b);
        }
    }
    Ok(PatchGrid { patch, side, blocks })
}

/// The set 𝒫 of vulnerable patches.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VulnerablePatchSet(pub BTreeSet<PatchCoord>);

impl VulnerablePatchSet {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PatchCoord> {
        self.0.iter()
    }

    pub fn contains(&self, p: &PatchCoord) -> bool {
        self.0.contains(p)
    }
}

/// Patches whose aggregate equals the grid maximum (within [`TIE_TOL`]).
/// An all-zero map has no vulnerable patch.
pub fn vulnerable_patches(bmap: &BoundaryMap, patch: usize, mode: Aggregate) -> Result<VulnerablePatchSet> {
    let grid = patchify(bmap.map(), patch)?;
    let scores: Vec<f64> = grid.blocks.iter().map(|b| mode.apply(b)).collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best <= 0.0 {
        return Ok(VulnerablePatchSet::default());
    }
    let set = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| best - s <= TIE_TOL)
        .map(|(i, _)| PatchCoord::new(i % grid.side, i / grid.side))
        .collect();
    Ok(VulnerablePatchSet(set))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapRole {
    Target,
    Prediction,
}

/// √N×√N map of patch vulnerability.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    side: usize,
    data: Vec<f64>,
    role: HeatmapRole,
}

impl Heatmap {
    pub fn new(side: usize, data: Vec<f64>, role: HeatmapRole) -> Result<Self> {
        if side == 0 || data.len() != side * side {
            return Err(Error::shape(format!(
                "{} values do not form a {side}×{side} heatmap",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("heatmap values must lie in [0, 1]".into()));
        }
        Ok(Self { side, data, role })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            data: vec![0.0; side * side],
            role: HeatmapRole::Target,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn role(&self) -> HeatmapRole {
        self.role
    }

    /// Value at column `x`, row `y`.
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.side + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Cells holding the maximum value exactly.
    pub fn argmax(&self) -> BTreeSet<PatchCoord> {
        let m = self.max();
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == m)
            .map(|(i, _)| PatchCoord::new(i % self.side, i / self.side))
            .collect()
    }

    /// Mirrors columns: column `j` moves to `side − 1 − j`.
    pub fn flip_horizontal(&self) -> Heatmap {
        let s = self.side;
        let data = (0..s * s).map(|i| self.data[(i / s) * s + (s - 1 - i % s)]).collect();
        Heatmap {
            side: s,
            data,
            role: self.role,
        }
    }

    /// Elementwise maximum with another heatmap of the same side.
    pub fn overlay(&self, other: &Heatmap) -> Heatmap {
        assert_eq!(self.side, other.side);
        Heatmap {
            side: self.side,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a.max(*b)).collect(),
            role: self.role,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        io::save_gray_png(path, self.side, self.side, &self.data)
    }
}

/// `S_p(x, y) = exp(−((x−p_x)² + (y−p_y)²) / 2σ²)` on a `side`×`side` grid.
pub fn gaussian_map(p: PatchCoord, side: usize, sigma: f64) -> Result<Heatmap> {
    if p.x >= side || p.y >= side {
        return Err(Error::shape(format!(
            "patch ({}, {}) lies outside the {side}×{side} grid",
            p.x, p.y
        )));
    }
    let two_s2 = 2.0 * sigma * sigma;
    let data = (0..side * side)
        .map(|i| {
            let dx = (i % side) as f64 - p.x as f64;
            let dy = (i / side) as f64 - p.y as f64;
            (-(dx * dx + dy * dy) / two_s2).exp()
        })
        .collect();
    Ok(Heatmap {
        side,
        data,
        role: HeatmapRole::Target,
    })
}

/// What a training target is built from.
#[derive(Clone, Copy, Debug)]
pub enum TargetSource<'a> {
    Real,
    Fake(&'a BoundaryMap),
}

/// Target heatmap S: zero for reals; for fakes, the overlay (elementwise
/// max) of the Gaussians centred on every vulnerable patch.
pub fn ground_truth_heatmap(source: TargetSource<'_>, patch: usize, mode: Aggregate, sigma: f64) -> Result<Heatmap> {
    match source {
        TargetSource::Real => Err(Error::Data(
            "a real sample's grid side is unknown; use ground_truth_heatmap_sized".into(),
        )),
        TargetSource::Fake(b) => {
            let side = patchify(b.map(), patch)?.side;
            ground_truth_heatmap_sized(source, side, patch, mode, sigma)
        }
    }
}

/// [`ground_truth_heatmap`] with an explicit grid side, so reals can be built too.
pub fn ground_truth_heatmap_sized(
    source: TargetSource<'_>,
    side: usize,
    patch: usize,
    mode: Aggregate,
    sigma: f64,
) -> Result<Heatmap> {
    match source {
        TargetSource::Real => Ok(Heatmap::zeros(side)),
        TargetSource::Fake(b) => {
            if b.height() != side * patch {
                return Err(Error::shape(format!(
                    "boundary map of side {} does not match a {side}-patch grid of size {patch}",
                    b.height()
                )));
            }
            let set = vulnerable_patches(b, patch, mode)?;
            let mut s = Heatmap::zeros(side);
            for p in set.iter() {
                s = s.overlay(&gaussian_map(*p, side, sigma)?);
            }
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bmap(side: usize, data: Vec<f64>) -> BoundaryMap {
        BoundaryMap::from_map(Map::new(side, side, data).unwrap()).unwrap()
    }

    #[test]
    fn patchify_grid_sides() {
        let m = Map::filled(112, 112, 0.0);
        let g = patchify(&m, 8).unwrap();
        assert_eq!(g.side(), 14);
        assert_eq!(g.blocks().len(), 196);
        assert_eq!(patchify(&Map::filled(16, 16, 0.0), 16).unwrap().side(), 1);
        assert!(patchify(&Map::filled(10, 10, 0.0), 4).is_err());
    }

    #[test]
    fn aggregate_examples() {
        for mode in [Aggregate::Max, Aggregate::Mean] {
            assert_eq!(aggregate(&[0.3; 4], mode), 0.3);
        }
        assert_eq!(aggregate(&[0.0, 1.0, 0.0, 0.0], Aggregate::Max), 1.0);
        assert_eq!(aggregate(&[0.0, 1.0, 0.0, 0.0], Aggregate::Mean), 0.25);
    }

    #[test]
    fn single_and_tied_maxima() {
        let mut d = vec![0.0; 16];
        d[2 * 4 + 0] = 0.9; // row 2, col 0 → patch (x=0, y=1)
        let set = vulnerable_patches(&bmap(4, d.clone()), 2, Aggregate::Max).unwrap();
        assert_eq!(set.0, BTreeSet::from([PatchCoord::new(0, 1)]));

        d[3] = 0.9; // row 0, col 3 → patch (1, 0)
        let set = vulnerable_patches(&bmap(4, d), 2, Aggregate::Max).unwrap();
        assert_eq!(set.0, BTreeSet::from([PatchCoord::new(0, 1), PatchCoord::new(1, 0)]));

        assert!(vulnerable_patches(&bmap(4, vec![0.0; 16]), 2, Aggregate::Max).unwrap().is_empty());
    }

    #[test]
    fn gaussian_examples() {
        let g = gaussian_map(PatchCoord::new(3, 2), 7, 1.0).unwrap();
        assert_eq!(g.at(3, 2), 1.0);
        assert!((g.at(4, 2) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((g.at(4, 3) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((g.at(4, 2) - 0.606531).abs() < 1e-6);
        assert!((g.at(4, 3) - 0.367879).abs() < 1e-6);
        assert!(gaussian_map(PatchCoord::new(7, 0), 7, 1.0).is_err());
    }

    #[test]
    fn targets_for_real_and_fake() {
        let real = ground_truth_heatmap_sized(TargetSource::Real, 14, 8, Aggregate::Max, 1.0).unwrap();
        assert!(real.is_zero());
        assert_eq!(real.side(), 14);

        let mut d = vec![0.0; 64];
        d[5 * 8 + 6] = 0.7; // patch (3, 2) at P = 2
        let s = ground_truth_heatmap(TargetSource::Fake(&bmap(8, d.clone())), 2, Aggregate::Max, 1.0).unwrap();
        assert_eq!(s, gaussian_map(PatchCoord::new(3, 2), 4, 1.0).unwrap());

        d[0] = 0.7; // patch (0, 0)
        let s = ground_truth_heatmap(TargetSource::Fake(&bmap(8, d)), 2, Aggregate::Max, 1.0).unwrap();
        let a = gaussian_map(PatchCoord::new(3, 2), 4, 1.0).unwrap();
        let b = gaussian_map(PatchCoord::new(0, 0), 4, 1.0).unwrap();
        for i in 0..16 {
            assert_eq!(s.data()[i], a.data()[i].max(b.data()[i]));
        }
        assert_eq!(s.at(3, 2), 1.0);
        assert_eq!(s.at(0, 0), 1.0);
    }

    #[test]
    fn heatmap_flip_maps_columns() {
        let g = gaussian_map(PatchCoord::new(1, 2), 5, 1.0).unwrap();
        let f = g.flip_horizontal();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(f.at(x, y), g.at(4 - x, y));
            }
        }
    }

    fn scan_oracle(data: &[f64], side: usize, patch: usize, mode: Aggregate) -> BTreeSet<PatchCoord> {
        let g = side / patch;
        let mut scores = vec![];
        for gy in 0..g {
            for gx in 0..g {
                let mut vals = vec![];
                for r in 0..patch {
                    for c in 0..patch {
                        vals.push(data[(gy * patch + r) * side + gx * patch + c]);
                    }
                }
                let s = match mode {
                    Aggregate::Max => vals.iter().cloned().fold(f64::MIN, f64::max),
                    Aggregate::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                };
                scores.push((PatchCoord::new(gx, gy), s));
            }
        }
        let best = scores.iter().map(|s| s.1).fold(f64::MIN, f64::max);
        if best <= 0.0 {
            return BTreeSet::new();
        }
        scores.into_iter().filter(|s| (best - s.1).abs() <= TIE_TOL).map(|s| s.0).collect()
    }

    #[test]
    fn vulnerable_patches_match_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for i in 0..500 {
            let mut data: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
            if i % 3 == 0 {
                // Copy block (0, 0) onto a random other block to force a tie.
                let (gx, gy) = (rng.random_range(1..4), rng.random_range(0..4));
                for r in 0..4 {
                    for c in 0..4 {
                        data[(gy * 4 + r) * 16 + gx * 4 + c] = data[r * 16 + c];
                    }
                }
            }
            let mode = if i % 2 == 0 { Aggregate::Max } else { Aggregate::Mean };
            let set = vulnerable_patches(&bmap(16, data.clone()), 4, mode).unwrap();
            assert_eq!(set.0, scan_oracle(&data, 16, 4, mode));
        }
    }

    proptest! {
        #[test]
        fn target_is_scale_invariant_and_peaks_at_one(
            data in prop::collection::vec(0.0f64..1.0, 64),
            scale in 0.01f64..100.0,
        ) {
            let b = bmap(8, data.clone());
            let scaled = bmap(8, data.iter().map(|v| v * scale).collect());
            let s = ground_truth_heatmap(TargetSource::Fake(&b), 2, Aggregate::Max, 1.0).unwrap();
            let s2 = ground_truth_heatmap(TargetSource::Fake(&scaled), 2, Aggregate::Max, 1.0).unwrap();
            prop_assert_eq!(&s, &s2);
            prop_assert_eq!(s.max(), 1.0);
            let set = vulnerable_patches(&b, 2, Aggregate::Max).unwrap();
            prop_assert_eq!(s.argmax(), set.0);
            prop_assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn reassembly_is_exact(data in prop::collection::vec(-1.0f64..1.0, 144)) {
            let m = Map::new(12, 12, data).unwrap();
            prop_assert_eq!(patchify(&m, 3).unwrap().assemble(), m);
        }
    }
}
