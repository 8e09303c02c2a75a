//! Checkpoint file: `STAVCKPT`, a `u16` version, the parameter table and a
//! JSON metadata blob. All integers and values are little-endian; values
//! are stored as `f64`, so a reload is bit-exact.
//!
//! ```text
//! magic[8] version:u16 count:u32
//! count x { name_len:u16 name rank:u8 dims:u32[rank] values:f64[prod(dims)] }
//! meta_len:u32 meta_json
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transforms::{Model, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"STAVCKPT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant_id: u8,
    pub beta: f64,
    pub steps: u64,
    pub config: ModelConfig,
}

impl CheckpointMeta {
    pub fn new(config: &ModelConfig, beta: f64, steps: u64) -> Self {
        Self { variant_id: config.variant.id(), beta, steps, config: config.clone() }
    }
}

pub fn to_bytes(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.config != model.config {
        return Err(Error::Checkpoint("metadata config differs from the model".into()));
    }
    let mut out = Vec::with_capacity(16 + model.params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Rebuild the model described by the metadata and load every parameter.
/// The table must name exactly the model's parameters with their shapes.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        table.push((name, Tensor::new(&shape, data)?));
    }
    let len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if meta.variant_id != meta.config.variant.id() {
        return Err(Error::Checkpoint("variant id disagrees with the stored config".into()));
    }
    let mut model = Model::new(meta.config.clone())?;
    if table.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, the model {}",
            table.len(),
            model.params.len()
        )));
    }
    for (name, value) in table {
        if model.params.find(&name).is_none() {
            return Err(Error::Checkpoint(format!("unknown parameter {name}")));
        }
        model
            .params
            .set_by_name(&name, value)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    Ok((model, meta))
}

pub fn save(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::Variant;

    fn small() -> ModelConfig {
        ModelConfig { width: 4, latent: 2, hyper: 2, blocks: 1, gate_width: 2, ..ModelConfig::new(Variant::Ssf, true) }
    }

    #[test]
    fn reload_is_bit_exact() {
        let mut model = Model::new(small()).unwrap();
        let v = model.params.iter().next().unwrap().value.value().map(|x| x + 1e-17 + 0.1);
        model.params.set(0, v).unwrap();
        let meta = CheckpointMeta::new(&model.config, 0.01, 7);
        let bytes = to_bytes(&model, &meta).unwrap();
        let (back, meta2) = from_bytes(&bytes).unwrap();
        assert_eq!(meta2, meta);
        for (a, b) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.value(), b.value.value());
        }
        assert_eq!(to_bytes(&back, &meta2).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_bad_magic_are_detected() {
        let model = Model::new(small()).unwrap();
        let bytes = to_bytes(&model, &CheckpointMeta::new(&model.config, 0.01, 0)).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_)) | Err(Error::Json(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
    }
}
