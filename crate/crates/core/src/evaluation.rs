//! Detection metrics, video-level aggregation, SSIM quality strata and the
//! perturbation suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthesis::{convolve_separable, gaussian_kernel, sigma_for_kernel, BlendMask, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }

    /// 0 for real, 1 for fake.
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ssim: Option<f64>,
}

impl ScoredSample {
    pub fn new(score: f64, label: Label, source_id: impl Into<String>) -> Self {
        Self {
            score,
            label,
            source_id: source_id.into(),
            mask_ssim: None,
        }
    }
}

fn check_scores(samples: &[ScoredSample]) -> Result<()> {
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    Ok(())
}

/// Mann–Whitney AUC: the fraction of (fake, real) pairs where the fake
/// scores higher, ties counting ½. Computed from rank sums with integer
/// doubled mid-ranks, so it equals pair counting exactly.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    check_scores(samples)?;
    let n_pos = samples.iter().filter(|s| s.label.is_fake()).count() as u64;
    let n_neg = samples.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {n_pos} fake and {n_neg} real"
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].score.partial_cmp(&samples[b].score).unwrap());
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && samples[order[j]].score == samples[order[i]].score {
            j += 1;
        }
        // Ranks i+1..=j share the doubled mid-rank (i+1)+j.
        let mid2 = (i + 1 + j) as u64;
        let pos = order[i..j].iter().filter(|&&k| samples[k].label.is_fake()).count() as u64;
        rank2_pos += mid2 * pos;
        i = j;
    }
    let u2 = rank2_pos - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Mean over fakes, in descending score order, of the precision at each
/// fake's rank. Ties keep input order.
pub fn average_precision(samples: &[ScoredSample]) -> Result<f64> {
    check_scores(samples)?;
    let n_pos = samples.iter().filter(|s| s.label.is_fake()).count();
    if n_pos == 0 {
        return Err(Error::Metric("AP needs at least one fake".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].score.partial_cmp(&samples[a].score).unwrap());
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if samples[k].label.is_fake() {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoAggregate {
    #[default]
    Mean,
    Max,
}

/// One sample per (source id, label) group, scored by the mean or max of its
/// frames. Groups come out sorted by source id, then label.
pub fn video_level_scores(samples: &[ScoredSample], agg: VideoAggregate) -> Vec<ScoredSample> {
    let mut groups: BTreeMap<(&str, Label), Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.source_id.as_str(), s.label)).or_default().push(s.score);
    }
    groups
        .into_iter()
        .map(|((id, label), scores)| {
            let score = match agg {
                VideoAggregate::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
                VideoAggregate::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            ScoredSample::new(score, label, id)
        })
        .collect()
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Per-pixel SSIM of two luma planes over the valid window positions; the
/// result is `(h−10)×(w−10)`, entry `(r, c)` centred on pixel `(r+5, c+5)`.
pub fn ssim_map(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    if a.len() != height * width || b.len() != height * width {
        return Err(Error::shape("ssim: planes do not match the given size"));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {height}×{width}"
        )));
    }
    let g = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wgt = g[i] * g[j];
                    let k = (r + i) * width + c + j;
                    let (x, y) = (a[k], b[k]);
                    ma += wgt * x;
                    mb += wgt * y;
                    saa += wgt * x * x;
                    sbb += wgt * y * y;
                    sab += wgt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
            let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
            out.push(num / den);
        }
    }
    Ok(out)
}

fn luma_pair(a: &Image, b: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
    if !a.same_dims(b) {
        return Err(Error::shape(format!(
            "ssim: {}×{} vs {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok((a.luma(), b.luma()))
}

/// Mean SSIM of the luma channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (la, lb) = luma_pair(a, b)?;
    let m = ssim_map(&la, &lb, a.height(), a.width())?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// SSIM averaged over window centres where `mask > 0.5`.
pub fn mask_ssim(fake: &Image, real: &Image, mask: &BlendMask) -> Result<f64> {
    let (la, lb) = luma_pair(fake, real)?;
    let (h, w) = (fake.height(), fake.width());
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape("mask_ssim: mask size differs from the images"));
    }
    let m = ssim_map(&la, &lb, h, w)?;
    let ow = w - SSIM_WINDOW + 1;
    let half = SSIM_WINDOW / 2;
    let (mut total, mut count) = (0.0, 0usize);
    for (i, v) in m.iter().enumerate() {
        if mask.map().get(i / ow + half, i % ow + half) > 0.5 {
            total += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Metric("mask_ssim: mask selects no pixel".into()));
    }
    Ok(total / count as f64)
}

/// Mask-SSIM bin edges: an underflow bin from 0 followed by the published ranges.
pub const DEFAULT_SSIM_EDGES: [f64; 8] = [0.0, 0.6, 0.8, 0.9, 0.925, 0.95, 0.97, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    /// Fakes whose Mask-SSIM falls in the bin.
    pub count: usize,
    /// `None` when the bin has fewer than two fakes.
    pub auc: Option<f64>,
}

/// Per-bin AUC of the fakes in each Mask-SSIM bin against all reals. Bins are
/// `[lo, hi)` except the last, which includes its upper edge.
pub fn stratify_by_ssim(samples: &[ScoredSample], edges: &[f64]) -> Result<Vec<BinRow>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("bin edges must be increasing, got {edges:?}")));
    }
    let reals: Vec<&ScoredSample> = samples.iter().filter(|s| !s.label.is_fake()).collect();
    let last = edges.len() - 2;
    let mut rows = Vec::new();
    for (b, w) in edges.windows(2).enumerate() {
        let (lo, hi) = (w[0], w[1]);
        let fakes: Vec<&ScoredSample> = samples
            .iter()
            .filter(|s| s.label.is_fake())
            .filter(|s| s.mask_ssim.is_some_and(|m| m >= lo && (m < hi || (b == last && m <= hi))))
            .collect();
        let auc = if fakes.len() < 2 || reals.is_empty() {
            None
        } else {
            let pool: Vec<ScoredSample> = fakes.iter().chain(&reals).map(|s| (*s).clone()).collect();
            Some(auc(&pool)?)
        };
        rows.push(BinRow {
            lo,
            hi,
            count: fakes.len(),
            auc,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Saturation,
    Contrast,
    Block,
    Noise,
    Blur,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 5] = [
        PerturbKind::Saturation,
        PerturbKind::Contrast,
        PerturbKind::Block,
        PerturbKind::Noise,
        PerturbKind::Blur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Saturation => "saturation",
            PerturbKind::Contrast => "contrast",
            PerturbKind::Block => "block",
            PerturbKind::Noise => "noise",
            PerturbKind::Blur => "blur",
        }
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation {s:?}")))
    }
}

pub const MAX_SEVERITY: u8 = 5;

/// Applies a perturbation of the given severity (0 = identity, up to 5).
pub fn perturb(img: &Image, kind: PerturbKind, severity: u8, seed: u64) -> Result<Image> {
    if severity > MAX_SEVERITY {
        return Err(Error::Config(format!("severity {severity} exceeds {MAX_SEVERITY}")));
    }
    if severity == 0 {
        return Ok(img.clone());
    }
    let mut r = rng::stream(seed, &[0x9e47, kind as u64, severity as u64]);
    let s = severity as f64;
    let (h, w) = (img.height(), img.width());
    Ok(match kind {
        PerturbKind::Saturation | PerturbKind::Contrast => {
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            let factor = 1.0 + sign * 0.1 * s;
            let [pr, pg, pb] = img.planes();
            if kind == PerturbKind::Saturation {
                let luma = img.luma();
                let planes = [pr, pg, pb].map(|p| p.iter().zip(&luma).map(|(v, l)| l + (v - l) * factor).collect());
                Image::from_planes(h, w, planes)
            } else {
                let mean = luma_mean(img);
                img.map(|v| mean + (v - mean) * factor)
            }
        }
        PerturbKind::Block => {
            let side = (h / 8).max(1);
            let mut planes = img.planes();
            for _ in 0..severity {
                let top = r.random_range(0..=h - side.min(h));
                let left = r.random_range(0..=w - side.min(w));
                for p in planes.iter_mut() {
                    for row in top..(top + side).min(h) {
                        p[row * w + left..(row * w + left + side).min((row + 1) * w)].fill(0.5);
                    }
                }
            }
            Image::from_planes(h, w, planes)
        }
        PerturbKind::Noise => {
            let normal = Normal::new(0.0, 0.01 * s).expect("positive sigma");
            let data: Vec<f64> = img.data().iter().map(|v| v + normal.sample(&mut r)).collect();
            Image::from_fn(h, w, |c, row, col| data[(c * h + row) * w + col])
        }
        PerturbKind::Blur => {
            let size = 2 * severity as usize + 1;
            let k = gaussian_kernel(size, sigma_for_kernel(size));
            let planes = img.planes().map(|p| convolve_separable(&p, h, w, &k));
            Image::from_planes(h, w, planes)
        }
    })
}

fn luma_mean(img: &Image) -> f64 {
    let l = img.luma();
    l.iter().sum::<f64>() / l.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub kind: PerturbKind,
    pub severity: u8,
    pub auc: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_ap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<BinRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbations: Option<Vec<PerturbRow>>,
}

impl EvalReport {
    /// Frame- and video-level AUC/AP of a scored set.
    pub fn from_samples(samples: &[ScoredSample], agg: VideoAggregate) -> Result<Self> {
        let n_pos = samples.iter().filter(|s| s.label.is_fake()).count();
        let videos = video_level_scores(samples, agg);
        Ok(Self {
            auc: auc(samples)?,
            ap: average_precision(samples)?,
            n_pos,
            n_neg: samples.len() - n_pos,
            video_auc: Some(auc(&videos)?),
            video_ap: Some(average_precision(&videos)?),
            bins: None,
            perturbations: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per metric group: overall, video, each bin and each perturbation.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        let mut s = String::from("section,key,auc,ap,count\n");
        writeln!(s, "frame,all,{},{},{}", self.auc, self.ap, self.n_pos + self.n_neg).unwrap();
        if self.video_auc.is_some() {
            writeln!(s, "video,all,{},{},", opt(self.video_auc), opt(self.video_ap)).unwrap();
        }
        for b in self.bins.iter().flatten() {
            writeln!(s, "bin,{}-{},{},,{}", b.lo, b.hi, opt(b.auc), b.count).unwrap();
        }
        for p in self.perturbations.iter().flatten() {
            writeln!(s, "perturb,{}:{},{},{},", p.kind.name(), p.severity, p.auc, p.ap).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(scores: &[f64], labels: &[u8]) -> Vec<ScoredSample> {
        scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&s, &l))| {
                ScoredSample::new(s, if l == 1 { Label::Fake } else { Label::Real }, format!("v{i}"))
            })
            .collect()
    }

    fn pair_count_auc(s: &[ScoredSample]) -> f64 {
        let (mut num2, mut pairs) = (0u64, 0u64);
        for p in s.iter().filter(|x| x.label.is_fake()) {
            for n in s.iter().filter(|x| !x.label.is_fake()) {
                pairs += 1;
                num2 += if p.score > n.score {
                    2
                } else if p.score == n.score {
                    1
                } else {
                    0
                };
            }
        }
        num2 as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.5; 4], &[1, 0, 1, 0])).unwrap(), 0.5);
        assert_eq!(auc(&set(&[0.9, 0.8, 0.2, 0.1], &[0, 1, 0, 1])).unwrap(), 0.25);
        assert!(matches!(auc(&set(&[0.1, 0.2], &[1, 1])), Err(Error::Metric(_))));
    }

    #[test]
    fn auc_equals_pair_counting_with_ties() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = r.random_range(2..=200);
            let levels = r.random_range(2..50);
            let mut s: Vec<ScoredSample> = (0..n)
                .map(|i| {
                    let label = if r.random::<bool>() { Label::Fake } else { Label::Real };
                    ScoredSample::new(r.random_range(0..levels) as f64 / levels as f64, label, format!("{i}"))
                })
                .collect();
            s[0].label = Label::Fake;
            s[1].label = Label::Real;
            assert_eq!(auc(&s).unwrap(), pair_count_auc(&s));
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<ScoredSample> = (0..100)
            .map(|i| ScoredSample::new(r.random(), if i % 3 == 0 { Label::Fake } else { Label::Real }, "x"))
            .collect();
        let t: Vec<ScoredSample> =
            s.iter().map(|x| ScoredSample { score: (3.0 * x.score).exp() - 7.0, ..x.clone() }).collect();
        assert_eq!(auc(&s).unwrap(), auc(&t).unwrap());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&set(&[0.9, 0.8, 0.2], &[1, 1, 0])).unwrap(), 1.0);
        let ap = average_precision(&set(&[0.9, 0.8, 0.2], &[1, 0, 1])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        for n in 1..20 {
            let mut labels = vec![0u8; n];
            labels[n - 1] = 1;
            let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
            assert_eq!(average_precision(&set(&scores, &labels)).unwrap(), 1.0 / n as f64);
        }
        assert!(average_precision(&set(&[0.3], &[0])).is_err());
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = vec![];
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn ap_ties_follow_input_order() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = r.random_range(2..=6);
            let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..3) as f64).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
            labels[0] = 1;
            let s = set(&scores, &labels);
            // The single ordering that is score-descending and index-ascending within ties.
            let order = permutations(n)
                .into_iter()
                .find(|p| {
                    p.windows(2).all(|w| {
                        scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1])
                    })
                })
                .unwrap();
            let (mut hits, mut total) = (0, 0.0);
            for (rank, &k) in order.iter().enumerate() {
                if labels[k] == 1 {
                    hits += 1;
                    total += hits as f64 / (rank + 1) as f64;
                }
            }
            assert_eq!(average_precision(&s).unwrap(), total / hits as f64);
        }
    }

    #[test]
    fn video_level_grouping() {
        let mut s = set(&[0.2, 0.4, 0.6, 0.9], &[0, 0, 0, 1]);
        for x in &mut s[..3] {
            x.source_id = "a".into();
        }
        let v = video_level_scores(&s, VideoAggregate::Mean);
        assert_eq!(v.len(), 2);
        assert!((v[0].score - 0.4).abs() < 1e-15);
        assert_eq!(v[1].score, 0.9);
        assert_eq!(video_level_scores(&s, VideoAggregate::Max)[0].score, 0.6);

        // Same id under both labels stays two groups.
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<ScoredSample> = (0..60)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Fake } else { Label::Real };
                ScoredSample::new(r.random(), label, format!("id{}", i % 7))
            })
            .collect();
        let v = video_level_scores(&s, VideoAggregate::Mean);
        for g in &v {
            let frames: Vec<f64> = s
                .iter()
                .filter(|x| x.source_id == g.source_id && x.label == g.label)
                .map(|x| x.score)
                .collect();
            assert_eq!(g.score, frames.iter().sum::<f64>() / frames.len() as f64);
        }
        assert_eq!(v.len(), 14);
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| r.random())
    }

    #[test]
    fn ssim_properties() {
        let a = random_image(0, 24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let bits: Vec<f64> = (0..24 * 20).map(|_| r.random_range(0..2) as f64).collect();
        let bin = Image::from_fn(24, 20, |_, row, col| bits[row * 20 + col]);
        let inv = bin.map(|v| 1.0 - v);
        assert!(ssim(&bin, &inv).unwrap() < 0.1);
        let b = random_image(2, 24, 20);
        let (x, y) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((x - y).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&x));
        assert!(ssim(&a, &random_image(0, 20, 20)).is_err());
    }

    #[test]
    fn ssim_matches_direct_formula_for_constant_images() {
        // Constant images: zero variance, so SSIM = (2ab + C1) / (a² + b² + C1).
        let (a, b) = (0.3, 0.7);
        let got = ssim(&Image::filled(16, 16, a), &Image::filled(16, 16, b)).unwrap();
        let expect = (2.0 * a * b + C1) / (a * a + b * b + C1);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn mask_ssim_cases() {
        let (a, b) = (random_image(3, 20, 20), random_image(4, 20, 20));
        let full = mask_ssim(&a, &b, &BlendMask::filled(20, 20, 1.0)).unwrap();
        assert!((full - ssim(&a, &b).unwrap()).abs() < 1e-12);
        assert!(matches!(
            mask_ssim(&a, &b, &BlendMask::filled(20, 20, 0.0)),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn stratify_single_bin_equals_global() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let s: Vec<ScoredSample> = (0..80)
            .map(|i| ScoredSample {
                mask_ssim: Some(r.random()),
                ..ScoredSample::new(r.random(), if i % 2 == 0 { Label::Fake } else { Label::Real }, "v")
            })
            .collect();
        let rows = stratify_by_ssim(&s, &[0.0, 1.0]).unwrap();
        assert_eq!(rows[0].auc, Some(auc(&s).unwrap()));
        assert_eq!(rows[0].count, 40);
    }

    #[test]
    fn stratify_high_quality_fakes_are_harder() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut s = Vec::new();
        for i in 0..2000 {
            s.push(ScoredSample::new(r.random_range(0.0..0.5), Label::Real, format!("r{i}")));
            let q: f64 = r.random_range(0.6..1.0);
            // Higher Mask-SSIM → lower fake score.
            let score = 0.9 - 1.5 * (q - 0.6) + r.random_range(-0.05..0.05);
            s.push(ScoredSample {
                mask_ssim: Some(q),
                ..ScoredSample::new(score, Label::Fake, format!("f{i}"))
            });
        }
        let rows = stratify_by_ssim(&s, &DEFAULT_SSIM_EDGES).unwrap();
        assert_eq!(rows.iter().map(|b| b.count).sum::<usize>(), 2000);
        assert_eq!(rows[0].count, 0);
        assert_eq!(rows[0].auc, None);
        let aucs: Vec<f64> = rows.iter().filter_map(|b| b.auc).collect();
        assert!(aucs.windows(2).all(|w| w[0] >= w[1]), "{aucs:?}");
        // Per-bin brute force.
        for b in &rows {
            let pool: Vec<ScoredSample> = s
                .iter()
                .filter(|x| !x.label.is_fake() || x.mask_ssim.is_some_and(|m| m >= b.lo && (m < b.hi || b.hi == 1.0)))
                .cloned()
                .collect();
            if let Some(a) = b.auc {
                assert_eq!(a, pair_count_auc(&pool));
            }
        }
    }

    #[test]
    fn perturbations() {
        let img = random_image(10, 32, 32);
        for kind in PerturbKind::ALL {
            assert_eq!(perturb(&img, kind, 0, 1).unwrap(), img);
            for sev in 1..=5 {
                let p = perturb(&img, kind, sev, 3).unwrap();
                assert_eq!(p, perturb(&img, kind, sev, 3).unwrap());
                assert_ne!(p, img, "{kind:?} {sev}");
                assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!(perturb(&img, PerturbKind::Noise, 6, 0).is_err());
        assert!("jpeg".parse::<PerturbKind>().is_err());
        assert_eq!("blur".parse::<PerturbKind>().unwrap(), PerturbKind::Blur);
    }

    #[test]
    fn noise_severity_five_has_sigma_005() {
        let img = Image::filled(32, 32, 0.5);
        for seed in 0..50 {
            let p = perturb(&img, PerturbKind::Noise, 5, seed).unwrap();
            let d: Vec<f64> = p.data().iter().map(|v| v - 0.5).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
            assert!((sd / 0.05 - 1.0).abs() < 0.2, "{sd}");
        }
    }

    #[test]
    fn blur_preserves_mean() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let img = Image::from_fn(64, 64, |_, row, col| {
            0.5 + 0.3 * ((row as f64) / 9.0).sin() * ((col as f64) / 7.0).cos() + 0.05 * r.random::<f64>()
        });
        let mean = |i: &Image| i.data().iter().sum::<f64>() / i.data().len() as f64;
        for sev in 1..=5 {
            let b = perturb(&img, PerturbKind::Blur, sev, 0).unwrap();
            assert!((mean(&b) - mean(&img)).abs() < 1e-3, "{sev}");
        }
    }

    #[test]
    fn report_serializes() {
        let s = set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        let mut rep = EvalReport::from_samples(&s, VideoAggregate::Mean).unwrap();
        rep.bins = Some(stratify_by_ssim(&s, &[0.0, 1.0]).unwrap());
        let back: EvalReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
        let csv = rep.to_csv();
        assert!(csv.starts_with("section,key,auc,ap,count\nframe,all,1,1,4\n"), "{csv}");
    }
}
