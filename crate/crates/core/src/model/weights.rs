//! FKF1 weight files.
//!
//! Layout (little-endian): magic `FKF1`, u32 version, u32 tensor count, then
//! per tensor u32 name length, UTF-8 name, u32 ndim, u32 dims, f32 payload.
//! The model config is written next to the weights as `<stem>.json`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{ModelConfig, ModelParams};

pub const FKF1_MAGIC: &[u8; 4] = b"FKF1";
pub const FKF1_VERSION: u32 = 1;

pub fn write_fkf1(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FKF1_MAGIC);
    out.extend_from_slice(&FKF1_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_fkf1(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != FKF1_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected FKF1".into(),
        });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != FKF1_VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let at = r.pos;
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 4, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Format {
            offset: at,
            message: format!("{name}: {e}"),
        })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: "trailing bytes after last tensor".into(),
        });
    }
    Ok(out)
}

fn config_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the weights and the `<stem>.json` config sidecar.
pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    let named: Vec<(&str, &Tensor)> = params.iter().collect();
    std::fs::write(path, write_fkf1(&named)).map_err(|e| Error::io(path, e))?;
    let cfg = config_path(path);
    let json = serde_json::to_string_pretty(params.config()).expect("config serializes");
    std::fs::write(&cfg, json).map_err(|e| Error::io(&cfg, e))
}

/// Loads weights into the layout of `config`; every tensor must be present
/// with the expected shape.
pub fn load_params_with(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = read_fkf1(&bytes)?;
    let mut params = ModelParams::zeros(config)?;
    if tensors.len() != params.len() {
        return Err(Error::Data(format!(
            "{}: {} tensors, the model has {}",
            path.display(),
            tensors.len(),
            params.len()
        )));
    }
    for (name, t) in tensors {
        let slot = params
            .get_mut(&name)
            .map_err(|_| Error::Data(format!("{}: unexpected tensor {name}", path.display())))?;
        if slot.dims() != t.dims() {
            return Err(Error::Data(format!(
                "{}: tensor {name} has shape {:?}, the model expects {:?}",
                path.display(),
                t.dims(),
                slot.dims()
            )));
        }
        *slot = t;
    }
    Ok(params)
}

/// Loads weights using the config sidecar written by [`save_params`].
pub fn load_params(path: &Path) -> Result<ModelParams> {
    let cfg = config_path(path);
    let text = std::fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
    let config: ModelConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cfg.display())))?;
    load_params_with(path, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.fkf");
        let p = init_params(&ModelConfig::tiny(), 7).unwrap();
        save_params(&path, &p).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(q.config(), p.config());
        for ((n, a), (m, b)) in p.iter().zip(q.iter()) {
            assert_eq!(n, m);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // A second save of the loaded params is byte-identical.
        let path2 = dir.path().join("w2.fkf");
        save_params(&path2, &q).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let b = write_fkf1(&[("ab", &t)]);
        assert_eq!(&b[..4], b"FKF1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b.len(), 12 + 4 + 2 + 4 + 4 + 8);
        assert_eq!(f32::from_le_bytes(b[30..34].try_into().unwrap()), -2.5);
    }

    #[test]
    fn corruption_is_reported_with_offsets() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let good = write_fkf1(&[("w", &t)]);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_fkf1(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(read_fkf1(&bad), Err(Error::Format { offset: 4, .. })));

        let cut = &good[..good.len() - 2];
        match read_fkf1(cut) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 12 + 4 + 1 + 4 + 4);
                assert!(message.contains("payload of w"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cross_config_load_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.fkf");
        let tiny = ModelConfig::tiny();
        save_params(&path, &init_params(&tiny, 0).unwrap()).unwrap();
        let other = ModelConfig {
            dim: 32,
            att_hidden: 16,
            ..tiny
        };
        let err = load_params_with(&path, &other).unwrap_err().to_string();
        assert!(err.contains("patch_embed.weight"), "{err}");
    }
}
