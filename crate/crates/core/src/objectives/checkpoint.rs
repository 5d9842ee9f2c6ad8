//! Binary snapshot of named tensors plus a JSON metadata blob.
//!
//! Layout, all integers little-endian:
//! `"ISLA"`, version `u32`, tensor count `u32`, then per tensor
//! `name_len u32, name, rank u32, dims u64…`, then every payload as raw
//! `f32` in table order, then `json_len u64` and the UTF-8 JSON.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ISLA";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint tensors do not match the model: missing {missing:?}, unexpected {unexpected:?}")]
    NameMismatch { missing: Vec<String>, unexpected: Vec<String> },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub meta: serde_json::Value,
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| CheckpointError::Format(format!("{what} {n} too large")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.meta).expect("JSON values serialize");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        r.take(4, "magic")?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let count = r.u32("tensor count")? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "tensor name")?)
                .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>, _>>()?;
            table.push((name, dims));
        }
        let mut tensors = BTreeMap::new();
        for (name, dims) in table {
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Format(format!("`{name}` is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(&dims, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Format(format!("duplicate tensor `{name}`")));
            }
        }
        let n = r.len("metadata length")?;
        let meta = serde_json::from_slice(r.take(n, "metadata")?)
            .map_err(|e| CheckpointError::Format(format!("metadata: {e}")))?;
        if !r.buf.is_empty() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(Checkpoint { tensors, meta })
    }

    /// Fails with [`CheckpointError::NameMismatch`] unless the stored names
    /// are exactly `expected`.
    pub fn expect_names<'a>(&self, expected: impl IntoIterator<Item = &'a str>) -> Result<(), CheckpointError> {
        let expected: std::collections::BTreeSet<&str> = expected.into_iter().collect();
        let missing: Vec<String> = expected.iter().filter(|n| !self.tensors.contains_key(**n)).map(|n| n.to_string()).collect();
        let unexpected: Vec<String> = self.tensors.keys().filter(|k| !expected.contains(k.as_str())).cloned().collect();
        if missing.is_empty() && unexpected.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::NameMismatch { missing, unexpected })
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
