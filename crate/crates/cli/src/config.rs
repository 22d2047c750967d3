//! Run configuration: one JSON document for every command.

use std::path::{Path, PathBuf};

use fakeformer::evaluation::{PerturbKind, VideoAggregate, DEFAULT_SSIM_EDGES, MAX_SEVERITY};
use fakeformer::model::ModelConfig;
use fakeformer::synthesis::SynthParams;
use fakeformer::training::TrainConfig;
use fakeformer::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Mask-SSIM bin edges for `--stratify`.
    pub bins: Vec<f64>,
    /// Perturbations and severities for `--perturb`.
    pub perturbations: Vec<PerturbKind>,
    pub severities: Vec<u8>,
    /// How frame scores combine into a video score.
    pub aggregation: VideoAggregate,
    /// Images per inference batch.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_SSIM_EDGES.to_vec(),
            perturbations: PerturbKind::ALL.to_vec(),
            severities: (0..=MAX_SEVERITY).collect(),
            aggregation: VideoAggregate::Mean,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Corpus manifest (JSON lines).
    pub manifest: Option<PathBuf>,
    /// Held-out manifest used for validation AUC during training.
    pub val_manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthParams,
    pub eval: EvalConfig,
    pub paths: Paths,
    /// Drives model initialization, synthesis and training order.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies command-line overrides and propagates the seed and synthesis
    /// parameters into the sections that use them.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        if out.is_some() {
            self.paths.out = out;
        }
        if let Some(s) = self.seed {
            self.model.seed = s;
            self.train.seed = s;
        }
        self.train.synth = self.synth.clone();
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be at least 1".into()));
        }
        if let Some(&s) = self.eval.severities.iter().find(|&&s| s > MAX_SEVERITY) {
            return Err(Error::Config(format!("severity {s} exceeds {MAX_SEVERITY}")));
        }
        Ok(self)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required: set \"seed\" in the config or pass --seed".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("fakeformer-out"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
