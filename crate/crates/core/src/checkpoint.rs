//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `CSALNET1`; `u32` length + JSON model
//! config; `u32` tensor count then per tensor `u32` name length, name,
//! `u32` rank, `u32` dims, `f32` values; the same block for batch-norm
//! running statistics; `u32` epoch; `f64` best validation AUC-J.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, NetworkParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CSALNET1";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: NetworkParams,
    /// Epoch (1-based) whose parameters are stored.
    pub epoch: u32,
    pub best_val_auc_j: f64,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let config = serde_json::to_vec(&self.params.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_u32(&mut out, config.len())?;
        out.extend_from_slice(&config);
        let tensors: Vec<(&str, &Tensor)> = self.params.store.iter().collect();
        write_tensors(&mut out, &tensors)?;
        let buffers: Vec<(&str, &Tensor)> = self.params.buffers.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_tensors(&mut out, &buffers)?;
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_val_auc_j.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                std::str::from_utf8(MAGIC).unwrap_or_default()
            )));
        }
        let len = r.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut params = build_model(&config).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;

        let tensors = read_tensors(&mut r)?;
        if tensors.len() != params.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, architecture has {}",
                tensors.len(),
                params.store.len()
            )));
        }
        for (name, t) in tensors {
            let id = params
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let slot = params.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        let buffers = read_tensors(&mut r)?;
        if buffers.len() != params.buffers.len() {
            return Err(Error::Checkpoint("running statistics do not match the architecture".into()));
        }
        for ((name, t), (expected, slot)) in buffers.into_iter().zip(params.buffers.iter_mut()) {
            if name != *expected || t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("unexpected running statistic {name}")));
            }
            *slot = t;
        }
        let epoch = r.u32()?;
        let best_val_auc_j = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { params, epoch, best_val_auc_j })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[(&str, &Tensor)]) -> Result<()> {
    put_u32(out, tensors.len())?;
    for (name, t) in tensors {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.ndim())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_tensors(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
