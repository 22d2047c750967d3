//! Corpora of real faces and the real/pseudo-fake samples built from them.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::Label;
use crate::rng;
use crate::synthesis::{gen_toy_face, make_cross_blended, make_self_blended, Image, LandmarkSet, PseudoFake, SynthMode};
use crate::vulnerability::{ground_truth_heatmap_sized, Heatmap, TargetSource};

use super::augment::augment;
use super::TrainConfig;

/// One real frame with its landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub landmarks: LandmarkSet,
}

/// A video or identity: one or more real frames sharing a source id.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub source_id: String,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub label: Label,
    /// Target heatmap S; all zero for reals.
    pub target: Heatmap,
    pub source_id: String,
}

/// `n` single-frame procedural faces, seeds `first_seed..first_seed+n`.
pub fn toy_corpus(n: usize, size: usize, first_seed: u64) -> Vec<CorpusItem> {
    (0..n as u64)
        .map(|i| {
            let seed = first_seed + i;
            let (image, landmarks) = gen_toy_face(seed, size);
            CorpusItem {
                source_id: format!("toy{seed:05}"),
                frames: vec![Frame { image, landmarks }],
            }
        })
        .collect()
}

/// Builds a pseudo-fake of `frame` per the configured mode. Cross-identity
/// blending picks its foreground face from another corpus item.
pub fn synthesize(corpus: &[CorpusItem], item: usize, frame: &Frame, r: &mut rng::Rng, cfg: &TrainConfig) -> Result<PseudoFake> {
    let seed: u64 = r.random();
    match cfg.synth_mode {
        SynthMode::Bi if corpus.len() > 1 => {
            let mut other = r.random_range(0..corpus.len() - 1);
            if other >= item {
                other += 1;
            }
            let donor = &corpus[other].frames[r.random_range(0..corpus[other].frames.len())];
            make_cross_blended(&donor.image, &donor.landmarks, &frame.image, &frame.landmarks, seed, &cfg.synth)
        }
        _ => make_self_blended(&frame.image, &frame.landmarks, seed, &cfg.synth),
    }
}

fn target_of(fake: &PseudoFake, patch: usize, cfg: &TrainConfig) -> Result<Heatmap> {
    let side = fake.boundary.height() / patch;
    ground_truth_heatmap_sized(TargetSource::Fake(&fake.boundary), side, patch, cfg.aggregate, cfg.sigma)
}

fn item_samples(
    corpus: &[CorpusItem],
    item: usize,
    r: &mut rng::Rng,
    cfg: &TrainConfig,
    patch: usize,
    augmented: bool,
) -> Result<Vec<TrainSample>> {
    let it = &corpus[item];
    if it.frames.is_empty() {
        return Err(Error::Data(format!("corpus item {} has no frames", it.source_id)));
    }
    let m = cfg.frames_per_video;
    let picks: Vec<usize> = if m <= it.frames.len() {
        let mut p = sample_indices(r, it.frames.len(), m).into_vec();
        p.sort_unstable();
        p
    } else {
        (0..m).map(|_| r.random_range(0..it.frames.len())).collect()
    };
    let mut out = Vec::with_capacity(2 * m);
    for f in picks {
        let frame = &it.frames[f];
        let side = frame.image.height() / patch;
        let fake = synthesize(corpus, item, frame, r, cfg)?;
        let real = TrainSample {
            image: frame.image.clone(),
            label: Label::Real,
            target: ground_truth_heatmap_sized(TargetSource::Real, side, patch, cfg.aggregate, cfg.sigma)?,
            source_id: it.source_id.clone(),
        };
        let fake = TrainSample {
            target: target_of(&fake, patch, cfg)?,
            image: fake.image,
            label: Label::Fake,
            source_id: it.source_id.clone(),
        };
        for s in [real, fake] {
            out.push(if augmented { augment(s, r, &cfg.augment) } else { s });
        }
    }
    Ok(out)
}

/// Samples for one epoch: per item, `m` frames each yielding an augmented
/// real and an augmented pseudo-fake. Every item draws from its own stream
/// keyed by (seed, epoch, item), so the result does not depend on threading.
pub fn build_batch(corpus: &[CorpusItem], epoch: u64, cfg: &TrainConfig, patch: usize) -> Result<Vec<TrainSample>> {
    if corpus.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let per_item: Vec<Vec<TrainSample>> = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, &[0xba7c, epoch, i as u64]);
            item_samples(corpus, i, &mut r, cfg, patch, true)
        })
        .collect::<Result<_>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

/// Fixed, unaugmented real/fake pairs for validation.
pub fn validation_samples(corpus: &[CorpusItem], cfg: &TrainConfig, patch: usize) -> Result<Vec<TrainSample>> {
    let per_item: Vec<Vec<TrainSample>> = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, &[0x7a1d, i as u64]);
            item_samples(corpus, i, &mut r, cfg, patch, false)
        })
        .collect::<Result<_>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_item_gives_a_balanced_pair() {
        let corpus = toy_corpus(1, 32, 0);
        let b = build_batch(&corpus, 0, &TrainConfig::default(), 8).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].label, Label::Real);
        assert!(b[0].target.is_zero());
        assert_eq!(b[1].label, Label::Fake);
        assert!(build_batch(&[], 0, &TrainConfig::default(), 8).is_err());
    }

    #[test]
    fn fake_targets_peak_at_one_over_seeds() {
        let corpus = toy_corpus(4, 32, 10);
        for mode in [SynthMode::Sbi, SynthMode::Bi] {
            for seed in 0..25 {
                let cfg = TrainConfig {
                    seed,
                    synth_mode: mode,
                    ..TrainConfig::default()
                };
                for s in build_batch(&corpus, 0, &cfg, 8).unwrap() {
                    match s.label {
                        Label::Fake => assert_eq!(s.target.max(), 1.0),
                        Label::Real => assert!(s.target.is_zero()),
                    }
                }
            }
        }
    }

    #[test]
    fn batches_are_deterministic_and_vary_by_epoch() {
        let corpus = toy_corpus(3, 32, 0);
        let cfg = TrainConfig {
            frames_per_video: 2,
            ..TrainConfig::default()
        };
        let a = build_batch(&corpus, 1, &cfg, 8).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, build_batch(&corpus, 1, &cfg, 8).unwrap());
        assert_ne!(a, build_batch(&corpus, 2, &cfg, 8).unwrap());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        assert_eq!(a, pool.install(|| build_batch(&corpus, 1, &cfg, 8).unwrap()));
    }
}
