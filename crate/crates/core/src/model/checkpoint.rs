//! Versioned binary checkpoint container. The layout is described in
//! `docs/checkpoint-format.md`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::growth::GrowthEvent;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HGROWCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    put_u32(w, bytes.len())?;
    w.write_all(bytes)
}

/// Serializes `model` into `w`.
pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    let wrap = |e: std::io::Error| Error::Checkpoint(e.to_string());
    w.write_all(&CHECKPOINT_MAGIC).map_err(wrap)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(wrap)?;
    put_bytes(w, &serde_json::to_vec(model.config())?).map_err(wrap)?;
    put_bytes(w, &serde_json::to_vec(model.history())?).map_err(wrap)?;
    let params = model.params();
    put_u32(w, params.len()).map_err(wrap)?;
    for (name, t) in params {
        put_bytes(w, name.as_bytes()).map_err(wrap)?;
        put_u32(w, t.shape().len()).map_err(wrap)?;
        for &d in t.shape() {
            put_u32(w, d).map_err(wrap)?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(wrap)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
}

/// Restores a model from `r`. Branch structure is rebuilt from the stored
/// growth history before tensors are filled in by name.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut rd = Reader { bytes: &bytes, pos: 0 };
    if rd.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = rd.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config: ModelConfig = serde_json::from_slice(rd.block()?)?;
    let history: Vec<GrowthEvent> = serde_json::from_slice(rd.block()?)?;
    let count = rd.u32()?;
    let mut stored = HashMap::with_capacity(count);
    for _ in 0..count {
        let name = std::str::from_utf8(rd.block()?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = rd.u32()?;
        let shape = (0..ndim).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = rd.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if stored.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if rd.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }

    let mut model = Model::new(config, 0)?;
    model.replay_history(&history)?;
    for (name, t) in model.params_mut() {
        let (shape, data) = stored
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {shape:?}, model expects {:?}",
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&data);
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}
