//! JSON-lines dataset manifests.

use std::path::{Path, PathBuf};

use fakeformer::evaluation::Label;
use fakeformer::synthesis::io::{load_landmarks, load_png, png_dims};
use fakeformer::training::{CorpusItem, Frame};
use fakeformer::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: PathBuf,
    pub landmarks: PathBuf,
    pub label: Label,
    pub source_id: String,
    /// Blend mask of a pseudo-fake, for Mask-SSIM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// The real frame a pseudo-fake was made from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PathBuf>,
}

/// A loaded manifest whose relative paths are resolved against its directory.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<Record>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let at = |m: String| Error::Data(format!("{}:{}: {m}", path.display(), i + 1));
            let mut r: Record = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
            if r.source_id.is_empty() {
                return Err(at("empty source_id".into()));
            }
            r.image = resolve(base, &r.image);
            r.landmarks = resolve(base, &r.landmarks);
            r.mask = r.mask.map(|m| resolve(base, &m));
            r.pair = r.pair.map(|m| resolve(base, &m));
            for p in [Some(&r.image), Some(&r.landmarks), r.mask.as_ref(), r.pair.as_ref()].into_iter().flatten() {
                if !p.exists() {
                    return Err(at(format!("{} does not exist", p.display())));
                }
            }
            records.push(r);
        }
        Ok(Self { records })
    }

    /// Writes records one per line; paths are stored as given.
    pub fn save(path: &Path, records: &[Record]) -> Result<()> {
        let mut text = String::new();
        for r in records {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Real frames grouped by source id, in order of first appearance.
    pub fn real_corpus(&self) -> Result<Vec<CorpusItem>> {
        let mut items: Vec<CorpusItem> = Vec::new();
        for r in self.records.iter().filter(|r| r.label == Label::Real) {
            let image = load_png(&r.image)?;
            let landmarks = load_landmarks(&r.landmarks, image.height(), image.width())?;
            let frame = Frame { image, landmarks };
            match items.iter_mut().find(|i| i.source_id == r.source_id) {
                Some(item) => item.frames.push(frame),
                None => items.push(CorpusItem {
                    source_id: r.source_id.clone(),
                    frames: vec![frame],
                }),
            }
        }
        Ok(items)
    }

    /// Checks every image has the given size without decoding pixel data.
    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        for r in &self.records {
            let (h, w) = png_dims(&r.image)?;
            if (h, w) != (height, width) {
                return Err(Error::Data(format!(
                    "{} is {h}×{w}, the model expects {height}×{width}",
                    r.image.display()
                )));
            }
        }
        Ok(())
    }
}
