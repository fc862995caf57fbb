//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `SCMOECKP`, `u32` version, `u32` length +
//! canonical JSON model config, `u32` parameter count, then per parameter
//! `u32` name length + UTF-8 name, `u32` rank, `u64` extents, raw `f64`
//! values. A `u8` flag announces optimizer state (`u64` step, then first
//! and second moments in parameter order). A SHA-256 of everything before
//! it closes the file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{AdamState, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCMOECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sorted-key compact JSON.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    /// Builds the model, requiring every parameter to be present exactly once.
    pub fn into_model(self) -> Result<(Model, Option<AdamState>)> {
        let mut model = Model::new(self.config, 0)?;
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        let mut seen = vec![false; model.params.len()];
        for (name, _) in &self.params {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Checkpoint(format!("parameter {name} stored twice")));
            }
        }
        model.load_values(self.params.iter().map(|(n, t)| (n.as_str(), t)))?;
        if let Some(state) = &self.optimizer {
            if !state.matches(&model) {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        Ok((model, self.optimizer))
    }
}

struct Hashing<W> {
    inner: W,
    hash: Sha256,
}

impl<W: Write> Hashing<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.hash.update(bytes);
        self.inner.write_all(bytes)?;
        Ok(())
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    fn floats(&mut self, data: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(data.len() * 8);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.put(&buf)
    }
}

fn len32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large")))
}

pub fn write_checkpoint<W: Write>(out: W, model: &Model, optimizer: Option<&AdamState>) -> Result<()> {
    let mut w = Hashing {
        inner: out,
        hash: Sha256::new(),
    };
    w.put(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    let cfg = canonical_json(&model.config)?;
    w.u32(len32(cfg.len(), "config")?)?;
    w.put(cfg.as_bytes())?;
    let entries = model.params.entries();
    w.u32(len32(entries.len(), "parameter list")?)?;
    for e in entries {
        w.u32(len32(e.name.len(), "name")?)?;
        w.put(e.name.as_bytes())?;
        w.u32(len32(e.value.rank(), "rank")?)?;
        for &d in e.value.shape() {
            w.u64(d as u64)?;
        }
        w.floats(e.value.data())?;
    }
    match optimizer {
        None => w.put(&[0])?,
        Some(state) => {
            if !state.matches(model) {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            w.put(&[1])?;
            w.u64(state.step)?;
            for t in state.m.iter().chain(&state.v) {
                w.floats(t.data())?;
            }
        }
    }
    let digest = w.hash.finalize();
    w.inner.write_all(&digest)?;
    w.inner.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < CHECKPOINT_MAGIC.len() + 32 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(n)?)?;
    config.validate()?;
    let count = c.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("size overflow".into()))?;
        let data = c.floats(len)?;
        params.push((name, Tensor::new(shape, data)?));
    }
    let optimizer = match c.take(1)?[0] {
        0 => None,
        1 => {
            let step = c.u64()?;
            let mut read_all = || -> Result<Vec<Tensor>> {
                params
                    .iter()
                    .map(|(_, p)| Tensor::new(p.shape().to_vec(), c.floats(p.len())?))
                    .collect()
            };
            let m = read_all()?;
            let v = read_all()?;
            Some(AdamState { step, m, v })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if c.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model, optimizer: Option<&AdamState>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, optimizer)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<AdamState>)> {
    read_checkpoint(fs::File::open(path)?)?.into_model()
}

/// Element-wise mean of the parameters of several checkpoints sharing one config.
pub fn average_checkpoints(paths: &[&Path]) -> Result<Model> {
    let (first, rest) = paths
        .split_first()
        .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    let (mut model, _) = load_checkpoint(first)?;
    for p in rest {
        let (other, _) = load_checkpoint(p)?;
        if other.config != model.config {
            return Err(Error::Checkpoint(format!("{} has a different config", p.display())));
        }
        for id in model.params.ids() {
            model.params.get_mut(id).add_assign(other.params.get(id));
        }
    }
    let scale = 1.0 / paths.len() as f64;
    for id in model.params.ids() {
        for v in model.params.get_mut(id).data_mut() {
            *v *= scale;
        }
    }
    Ok(model)
}

fn layer_index(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.split('.').next()?.parse().ok()
}

/// Copies the shared front end, the first `m` encoder blocks and the first
/// `k` layers of each decoder from a dense `baseline`. Returns the number
/// of tensors copied.
pub fn init_from_baseline(model: &mut Model, baseline: &Model) -> Result<usize> {
    let (m, k) = (model.config.m, model.config.k);
    let mut copied = 0;
    for e in baseline.params.entries() {
        let keep = if let Some(i) = layer_index(&e.name, "encoder.layers.") {
            i < m
        } else if let Some(i) = layer_index(&e.name, "decoder.l2r.layers.").or(layer_index(&e.name, "decoder.r2l.layers.")) {
            i < k
        } else {
            true
        };
        if !keep {
            continue;
        }
        if let Some(id) = model.params.find(&e.name) {
            let slot = model.params.get_mut(id);
            if slot.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!("baseline parameter {} has a different shape", e.name)));
            }
            *slot = e.value.clone();
            copied += 1;
        }
    }
    Ok(copied)
}
