//! Binary parameter checkpoints plus a JSON sidecar.
//!
//! ```text
//! "SFMC"  u32 version  u32 count
//! count × { u32 name_len, name, u32 ndim, ndim × u64 dim, u32 dtype_len, dtype }
//! payloads, little-endian, in manifest order
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFMC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub epoch: usize,
    /// `None` when no training step ran.
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

pub fn encode_tensors(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&3u32.to_le_bytes());
        out.extend_from_slice(b"<f8");
    }
    for (_, t) in entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    at: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("missing SFMC magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = r.string()?;
        if dtype != "<f8" && dtype != "<f4" {
            return Err(Error::Checkpoint(format!("tensor '{name}' has unsupported dtype '{dtype}'")));
        }
        manifest.push((name, shape, dtype));
    }
    let mut out = Vec::with_capacity(manifest.len());
    for (name, shape, dtype) in manifest {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if dtype == "<f8" {
            r.take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        } else {
            r.take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        out.push((name, t));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(out)
}

/// Path of the JSON sidecar next to a checkpoint.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_tensors(&params.named());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::json(&mp, e))?;
    fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&mp, e))
}

impl ModelParams {
    /// Copies tensors into a freshly shaped model for `config`; every name
    /// and shape must match.
    pub fn from_tensors(config: &ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut p = ModelParams::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            p.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for (i, (name, shape)) in expected.iter().enumerate() {
            match entries.get(i) {
                None => {
                    return Err(Error::Checkpoint(format!("tensor '{name}' is missing")));
                }
                Some((got, _)) if got != name => {
                    return Err(Error::Checkpoint(format!("expected tensor '{name}', found '{got}'")));
                }
                Some((_, t)) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?}, model expects {shape:?}",
                        t.shape()
                    )));
                }
                Some(_) => {}
            }
        }
        if entries.len() > expected.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor '{}'",
                entries[expected.len()].0
            )));
        }
        for (slot, (_, t)) in p.tensors_mut().into_iter().zip(entries) {
            *slot = t;
        }
        Ok(p)
    }
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode_tensors(&bytes)?;
    ModelParams::from_tensors(config, entries)
}

/// Loads a checkpoint whose config comes from its sidecar.
pub fn load_with_meta(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let params = load_checkpoint(path, &meta.config)?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PositionalKind;

    fn cfg() -> ModelConfig {
        ModelConfig {
            patch_size: 3,
            bands: 6,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            classes: 3,
            mlp_ratio: 2,
            dropout: 0.0,
            positional: PositionalKind::Learned,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::init(&cfg(), 11).unwrap();
        let meta = CheckpointMeta { config: cfg(), epoch: 3, loss: Some(0.25), metrics: None };
        save_checkpoint(&path, &p, &meta).unwrap();
        let (q, m) = load_with_meta(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, meta);
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let p = ModelParams::init(&cfg(), 0).unwrap();
        let bytes = encode_tensors(&p.named());
        let other = ModelConfig { depth: 2, ..cfg() };
        let err = ModelParams::from_tensors(&other, decode_tensors(&bytes).unwrap()).unwrap_err();
        assert!(err.to_string().contains("blocks.0.norm1.gain") || err.to_string().contains("final_norm.gain"), "{err}");

        let wide = ModelConfig { classes: 4, ..cfg() };
        let err = ModelParams::from_tensors(&wide, decode_tensors(&bytes).unwrap()).unwrap_err();
        assert!(err.to_string().contains("head.weight"), "{err}");
    }

    #[test]
    fn truncated_bytes_are_rejected() {
        let p = ModelParams::init(&cfg(), 0).unwrap();
        let bytes = encode_tensors(&p.named());
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_tensors(b"XXXX").is_err());
    }
}
