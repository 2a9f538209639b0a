//! Stage checkpoints: a one-line versioned header followed by a JSON body.
//! Floats are written in shortest round-trip form, so reloading is
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PdpError, Result};
use crate::model::Model;
use crate::ppg::PrototypeBank;

pub const MAGIC: &str = "PDPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Stages completed, one-based.
    pub stage: usize,
    /// `(task_id, first_entry, entry_count)` of every private slab.
    pub slab_boundaries: Vec<(usize, usize, usize)>,
    pub model: Model,
    pub bank: PrototypeBank,
}

impl Checkpoint {
    pub fn new(stage: usize, model: &Model, bank: &PrototypeBank) -> Self {
        Self { stage, slab_boundaries: model.private.boundaries(), model: model.clone(), bank: bank.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
        out.extend(serde_json::to_vec(self).expect("checkpoint serializes"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| PdpError::Checkpoint("missing header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| PdpError::Checkpoint("header is not UTF-8".into()))?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| PdpError::Checkpoint(format!("bad header {header:?}")))?;
        if version != VERSION {
            return Err(PdpError::Checkpoint(format!("version {version}, expected {VERSION}")));
        }
        let ck: Self = serde_json::from_slice(&bytes[nl + 1..]).map_err(|e| PdpError::Checkpoint(e.to_string()))?;
        if ck.slab_boundaries != ck.model.private.boundaries() {
            return Err(PdpError::Checkpoint("slab boundaries disagree with the private pool".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
