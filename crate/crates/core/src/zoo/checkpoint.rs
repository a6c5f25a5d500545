//! Binary checkpoint: `"MSCP" | u32 version | u32 tensor_count |` per tensor
//! `u16 name_len | name | u8 ndim | u32 dims[ndim] | f32 data` `| u32 meta_len
//! | meta JSON`. Integers and floats are little-endian.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, Result, ZooError};
use crate::tensor::ModelGraph;

pub const CKPT_MAGIC: &[u8; 4] = b"MSCP";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    /// Epochs completed when the weights were captured.
    pub epoch: usize,
    pub lr: f64,
    pub best_metric: Option<f64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(model: ModelSpec) -> Self {
        CheckpointMeta { model, epoch: 0, lr: 0.0, best_metric: None, notes: BTreeMap::new() }
    }
}

fn fmt_err(m: impl Into<String>) -> ZooError {
    ZooError::Format(m.into())
}

/// Serializes parameters and running statistics in visiting order.
pub fn write_checkpoint(graph: &ModelGraph, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let mut tensors = Vec::new();
    graph.visit_state(&mut |p| tensors.push((p.name.clone(), p.value.dims().to_vec(), p.value.data().to_vec())));
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in &tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| fmt_err(format!("name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(meta).map_err(|e| fmt_err(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| fmt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and rebuilds the graph it describes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelGraph, CheckpointMeta)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CKPT_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| fmt_err("tensor name is not UTF-8"))?.to_string();
        let ndim = c.u8()? as usize;
        let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| fmt_err("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(fmt_err(format!("duplicate tensor `{name}`")));
        }
    }
    let meta_len = c.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(c.take(meta_len)?).map_err(|e| fmt_err(format!("metadata: {e}")))?;
    if c.pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let mut graph = meta.model.build()?;
    let mut problem = None;
    graph.visit_state_mut(&mut |p| {
        if problem.is_some() {
            return;
        }
        match tensors.remove(&p.name) {
            Some((dims, data)) if dims == p.value.dims() => p.value.data_mut().copy_from_slice(&data),
            Some((dims, _)) => {
                problem = Some(fmt_err(format!("`{}` has dims {dims:?}, model expects {:?}", p.name, p.value.dims())))
            }
            None => problem = Some(fmt_err(format!("missing tensor `{}`", p.name))),
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(fmt_err(format!("unexpected tensor `{extra}`")));
    }
    Ok((graph, meta))
}

pub fn save_checkpoint(graph: &ModelGraph, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(graph, meta)?;
    std::fs::write(path, bytes).map_err(|source| ZooError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|source| ZooError::Io { path: path.to_path_buf(), source })?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Tensor};
    use crate::zoo::{ClassifierConfig, ModelKind, UNetConfig};

    fn unet_spec() -> ModelSpec {
        ModelSpec::Unet { kind: ModelKind::TumorSeg, config: UNetConfig::desk(32, 32, 4) }
    }

    #[test]
    fn round_trip_is_exact() {
        let spec = unet_spec();
        let mut g = spec.build().unwrap();
        // Move running statistics away from their defaults.
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| (i % 13) as f32 / 13.0).unwrap();
        g.forward(&x, Mode::Train).unwrap();
        let mut meta = CheckpointMeta::new(spec);
        meta.epoch = 3;
        meta.lr = 2e-4;
        meta.best_metric = Some(0.123456789);
        let bytes = write_checkpoint(&g, &meta).unwrap();
        let (g2, meta2) = read_checkpoint(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(write_checkpoint(&g2, &meta2).unwrap(), bytes);
        assert_eq!(g.infer(&x).unwrap().data(), g2.infer(&x).unwrap().data());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let spec =
            ModelSpec::Classifier { config: ClassifierConfig { height: 32, width: 32, ..ClassifierConfig::desk(0) } };
        let g = spec.build().unwrap();
        let bytes = write_checkpoint(&g, &CheckpointMeta::new(spec)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(read_checkpoint(&bad).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() / 2]).is_err());
    }
}
