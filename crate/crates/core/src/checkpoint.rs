//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "CPPCKPT1"
//! version     u32      currently 1
//! header_len  u64      byte length of the JSON header
//! header      JSON     CheckpointHeader
//! data        f64 LE   parameter blocks back to back, in header order
//! ```
//!
//! Each header block records its name, section (`encoder`, `text`,
//! `prompt`, `enhancer`, `decoder`, `head`, `box`), shape and offset into
//! the data section in values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::training::LossWeights;

pub const MAGIC: &[u8; 8] = b"CPPCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub section: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Run settings stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub sigma: f64,
    pub loss: LossWeights,
    pub seed: u64,
    pub epochs: usize,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self { sigma: crate::filtering::DEFAULT_SIGMA, loss: LossWeights::default(), seed: 0, epochs: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

fn section_of(name: &str) -> &str {
    name.split('.').next().unwrap_or("")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (name, v) in self.model.params.iter() {
            blocks.push(BlockInfo {
                name: name.to_string(),
                section: section_of(name).to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
                offset,
            });
            offset += v.len();
        }
        let header = CheckpointHeader { version: VERSION, config: self.model.config.clone(), meta: self.meta.clone(), blocks };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + hjson.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, v) in self.model.params.iter() {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut u4 = [0u8; 4];
        r.read_exact(&mut u4).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(u4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut u8b = [0u8; 8];
        r.read_exact(&mut u8b).map_err(|_| bad("truncated header length"))?;
        let hlen = u64::from_le_bytes(u8b) as usize;
        if hlen > r.len() {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..hlen])?;
        let data = &r[hlen..];
        header.config.validate()?;
        let template = crate::model::init_params(&header.config);
        let mut params = ParamStore::new();
        for b in &header.blocks {
            let n = b.rows * b.cols;
            let start = b.offset * 8;
            let end = start + n * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("block `{}` runs past the data section", b.name)));
            }
            let vals: Vec<f64> = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let arr = Array2::from_shape_vec((b.rows, b.cols), vals).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.insert(b.name.clone(), arr);
        }
        // Parameter set must match what the architecture expects.
        if params.len() != template.len() {
            return Err(Error::Checkpoint(format!("{} blocks stored, architecture needs {}", params.len(), template.len())));
        }
        for (name, v) in template.iter() {
            match params.get(name) {
                Some(p) if p.dim() == v.dim() => {}
                _ => return Err(Error::Checkpoint(format!("missing or misshapen block `{name}`"))),
            }
        }
        // Re-order to the architecture's canonical order.
        let mut ordered = ParamStore::new();
        for (name, _) in template.iter() {
            ordered.insert(name, params.get(name).expect("checked above").clone());
        }
        Ok(Self { model: Model { config: header.config, params: ordered }, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path.as_ref())?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::new(ModelConfig { d_model: 8, heads: 2, enhancer_blocks: 1, decoder_blocks: 1, num_queries: 4, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut model = tiny();
        model.params.get_mut("head.logit_bias").unwrap()[[0, 0]] = std::f64::consts::PI;
        let ck = Checkpoint { model, meta: CheckpointMeta { seed: 7, epochs: 3, ..Default::default() } };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }

    #[test]
    fn header_lists_sections() {
        let bytes = Checkpoint { model: tiny(), meta: Default::default() }.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let h: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        let sections: std::collections::BTreeSet<_> = h.blocks.iter().map(|b| b.section.as_str()).collect();
        for s in ["encoder", "enhancer", "decoder", "box", "head"] {
            assert!(sections.contains(s));
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint { model: tiny(), meta: Default::default() }.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).is_err());
    }
}
