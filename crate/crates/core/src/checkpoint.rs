//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "AVSEPCK\0" | u32 version | u64 header length | JSON header
//! | tensor payload in header order | SHA-256 of everything before it
//! ```
//!
//! The JSON header records the payload kind, dtype, the tensor index and a
//! free-form `meta` object (architecture, seeds, reports).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::real::Real;

const MAGIC: &[u8; 8] = b"AVSEPCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Array2<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Array2<T>) {
        self.tensors.push((name.into(), t.clone()));
    }

    /// Appends every tensor of `p`, names prefixed with `prefix`.
    pub fn push_params<P: Parameters<T>>(&mut self, prefix: &str, p: &P) {
        p.visit(&mut |name, t| self.tensors.push((format!("{prefix}{name}"), t.clone())));
    }

    pub fn get(&self, name: &str) -> Result<&Array2<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{name}`")))
    }

    /// Overwrites every tensor of `p` from entries named `prefix + name`;
    /// shapes must agree.
    pub fn load_params<P: Parameters<T>>(&self, prefix: &str, p: &mut P) -> Result<()> {
        let mut err = None;
        p.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let full = format!("{prefix}{name}");
            match self.get(&full) {
                Ok(src) if src.dim() == t.dim() => t.assign(src),
                Ok(src) => {
                    err = Some(Error::CorruptCheckpoint(format!(
                        "tensor `{full}` has shape {:?}, expected {:?}",
                        src.dim(),
                        t.dim()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            dtype: T::DTYPE.to_string(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in &self.tensors {
            for &v in t.iter() {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses a checkpoint, converting the payload to `T` if it was written
    /// with another dtype.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic or truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let body_len = bytes.len() - 32;
        if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body_len)
            .ok_or_else(|| corrupt("header length out of range"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend])?;
        let width = match header.dtype.as_str() {
            "float32" => 4,
            "float64" => 8,
            other => return Err(Error::CorruptCheckpoint(format!("unknown dtype `{other}`"))),
        };
        let mut pos = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.rows * e.cols;
            let end = pos + n * width;
            if end > body_len {
                return Err(corrupt("payload shorter than tensor index"));
            }
            let vals: Vec<T> = bytes[pos..end]
                .chunks_exact(width)
                .map(|c| {
                    if width == T::BYTES {
                        T::read_le(c)
                    } else if width == 4 {
                        T::lit(f32::read_le(c) as f64)
                    } else {
                        T::lit(f64::read_le(c))
                    }
                })
                .collect();
            tensors.push((
                e.name.clone(),
                Array2::from_shape_vec((e.rows, e.cols), vals).expect("length checked"),
            ));
            pos = end;
        }
        if pos != body_len {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks the payload kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                ck.kind
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let mut c = Checkpoint::new("test", serde_json::json!({"seed": 3}));
        c.push("a", &Array2::from_shape_fn((2, 3), |(i, j)| i as f64 - 0.25 * j as f64));
        c.push("b", &Array2::from_elem((1, 4), std::f64::consts::PI));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn dtype_conversion_on_load() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("b").unwrap()[(0, 2)], std::f32::consts::PI);
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, 30, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::<f64>::from_bytes(&bytes[..cut]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 40] ^= 1;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }
}
