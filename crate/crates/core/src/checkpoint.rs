//! VCTR checkpoint container.
//!
//! Layout: magic `VCTR`, u32 format version, u32 metadata length, a JSON
//! metadata block (configs, step counter, RNG state, payload dtype), then
//! named parameter tensors: u32 name length, name bytes, u32 rank, u32
//! dims, and the little-endian float payload.
//!
//! The payload is f32 for published/inference checkpoints and f64 for
//! training checkpoints, declared by the metadata `dtype` field; the f64
//! mode exists so a save/resume cycle reproduces the uninterrupted run
//! bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VCTR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Unsupported(format!("checkpoint dtype {other}"))),
        }
    }
}

#[derive(Debug)]
pub struct CheckpointFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl CheckpointFile {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save<'a>(
    path: impl AsRef<Path>,
    mut meta: serde_json::Value,
    tensors: impl Iterator<Item = (&'a str, &'a Tensor)>,
    dtype: Dtype,
) -> Result<()> {
    meta["dtype"] = serde_json::Value::String(dtype.as_str().to_string());
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| Error::config(format!("checkpoint metadata serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => {
                for &v in &t.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<CheckpointFile> {
    let bytes = fs::read(path)?;
    let need = |off: usize, len: usize, what: &str| -> Result<&[u8]> {
        bytes.get(off..off + len).ok_or(Error::Parse {
            offset: off as u64,
            message: format!("truncated while reading {what}"),
        })
    };
    if need(0, 4, "magic")? != MAGIC {
        return Err(Error::Parse { offset: 0, message: "missing VCTR magic".into() });
    }
    let u32_at = |off: usize, what: &str| -> Result<u32> {
        let b = need(off, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let version = u32_at(4, "format version")?;
    if version != VERSION {
        return Err(Error::Unsupported(format!("checkpoint format version {version}")));
    }
    let meta_len = u32_at(8, "metadata length")? as usize;
    let meta: serde_json::Value = serde_json::from_slice(need(12, meta_len, "metadata")?)
        .map_err(|e| Error::Parse { offset: 12, message: format!("metadata JSON: {e}") })?;
    let dtype = Dtype::from_str(meta.get("dtype").and_then(|v| v.as_str()).unwrap_or("f32"))?;
    let elem = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut tensors = Vec::new();
    let mut pos = 12 + meta_len;
    while pos < bytes.len() {
        let name_len = u32_at(pos, "tensor name length")? as usize;
        let name = String::from_utf8(need(pos + 4, name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::Parse {
                offset: (pos + 4) as u64,
                message: "tensor name is not UTF-8".into(),
            })?;
        pos += 4 + name_len;
        let rank = u32_at(pos, "tensor rank")? as usize;
        pos += 4;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(pos, "tensor dim")? as usize);
            pos += 4;
        }
        let n: usize = shape.iter().product();
        let payload = need(pos, n * elem, "tensor payload")?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                .collect(),
        };
        pos += n * elem;
        tensors.push((name, Tensor::new(shape, data)));
    }
    Ok(CheckpointFile { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn f64_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let t = Tensor::new(vec![2, 2], vec![1.0 / 3.0, -2.5e-7, 1e300, 0.1]);
        save(&p, json!({"kind": "test", "step": 7}), [("a.w", &t)].into_iter(), Dtype::F64).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.meta["step"], 7);
        assert_eq!(back.meta["dtype"], "f64");
        let got = back.tensor("a.w").unwrap();
        assert_eq!(got.shape, vec![2, 2]);
        for (a, b) in got.data.iter().zip(t.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_payload_narrows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t32.ckpt");
        let t = Tensor::new(vec![3], vec![0.25, 1.0 / 3.0, -8.0]);
        save(&p, json!({}), [("x", &t)].into_iter(), Dtype::F32).unwrap();
        let back = load(&p).unwrap();
        let got = back.tensor("x").unwrap();
        assert_eq!(got.data[0], 0.25);
        assert_eq!(got.data[1], (1.0f32 / 3.0) as f64);
        assert_eq!(got.data[2], -8.0);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"WHAT").unwrap();
        assert!(matches!(load(&p).unwrap_err(), Error::Parse { offset: 0, .. }));
    }
}
