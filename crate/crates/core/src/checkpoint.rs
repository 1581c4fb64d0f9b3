//! Binary checkpoints.
//!
//! Layout (little-endian): magic `PMOECKPT`, `u32` version, `u64` length of
//! the `key=value` config text and the text itself, `u32` tensor count,
//! then per tensor `u32` name length, name bytes, `u32` rank, `u64` per
//! dimension and the raw `f64` values.

use std::path::Path;

use pathmoe_autodiff::{ParamStore, Tensor};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::model::check_shapes;
use crate::ppr::ByteReader;

const MAGIC: &[u8; 8] = b"PMOECKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Fails with the offending tensor names if the stored shapes do not
    /// fit `config` on a graph with `n_relations_base` relations.
    pub fn validate(
        &self,
        config: &crate::config::ModelConfig,
        n_relations_base: usize,
    ) -> Result<()> {
        check_shapes(&self.params, config, n_relations_base)
    }
}

pub fn encode(params: &ParamStore, config: &RunConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CoreError::Format("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CoreError::Format(format!("unsupported version {version}")));
    }
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| CoreError::Format("config block is not UTF-8".into()))?;
    let mut config = RunConfig::default();
    config
        .apply_text(text)
        .map_err(|e| CoreError::Format(format!("config block: {e}")))?;
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| CoreError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        let t = Tensor::new(shape, data).map_err(|e| CoreError::Format(e.to_string()))?;
        params
            .insert(name.clone(), t)
            .map_err(|_| CoreError::Format(format!("duplicate tensor {name}")))?;
    }
    if !r.at_end() {
        return Err(CoreError::Format(
            "trailing bytes after the last tensor".into(),
        ));
    }
    Ok(Checkpoint { config, params })
}

pub fn save(path: &Path, params: &ParamStore, config: &RunConfig) -> Result<()> {
    std::fs::write(path, encode(params, config)).map_err(|e| CoreError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(&bytes)
}
