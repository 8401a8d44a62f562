//! `CWPC` checkpoints: iteration, the run configuration as text, and every
//! encoder parameter as `float32`.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::RunConfig;
use super::volume::Reader;
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CWPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Completed training iterations.
    pub iteration: u64,
    pub config: RunConfig,
    pub weights: EncoderWeights<f32>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        let params = self.weights.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params {
            put_str(&mut out, name);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `path` only labels error messages.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        let mut r = Reader::new(bytes);
        if r.take(4) != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let iteration = r.u64().ok_or_else(|| bad("truncated header"))?;
        let string = |r: &mut Reader| -> Result<String> {
            let n = r.u32().ok_or_else(|| bad("truncated string length"))? as usize;
            let raw = r.take(n).ok_or_else(|| bad("truncated string"))?;
            String::from_utf8(raw.to_vec()).map_err(|_| bad("string is not UTF-8"))
        };
        let text = string(&mut r)?;
        let config = RunConfig::parse(&text).map_err(|e| bad(&format!("embedded config: {e}")))?;
        let count = r.u32().ok_or_else(|| bad("truncated parameter count"))?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name = string(&mut r)?;
            let ndim = r.u8().ok_or_else(|| bad("truncated parameter rank"))? as usize;
            let dims: Vec<usize> = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("truncated parameter dims"))?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("parameter dims overflow"))?;
            let raw = r
                .take(n.checked_mul(4).ok_or_else(|| bad("parameter dims overflow"))?)
                .ok_or_else(|| bad("truncated parameter data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| bad(&e.to_string()))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(bad(&format!("duplicate parameter {name}")));
            }
        }
        if !r.is_at_end() {
            return Err(bad("trailing bytes"));
        }
        let weights =
            EncoderWeights::from_params(config.train.encoder.clone(), params).map_err(|e| bad(&e.to_string()))?;
        Ok(Checkpoint {
            iteration,
            config,
            weights,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_bytes(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
