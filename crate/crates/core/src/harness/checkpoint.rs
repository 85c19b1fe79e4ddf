//! Model checkpoints, framed like the wire protocol under their own tag.
//!
//! ```text
//! "FPDA" | version u8 | tag 0x10 | round u32 | node u32 (0)
//! | metadata length u64 | metadata (JSON)
//! | parameter count u64 | parameters f64...
//! | block count u32 | per block: node u32, length u64, f64...
//! | CRC-32 of everything before it
//! ```
//!
//! The blocks hold each node's own batch-norm segments after FedBN.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{NodeId, MAGIC, VERSION};
use crate::model::{MlpArchitecture, ParamLayout};
use crate::numerics::ParamVector;

pub const CHECKPOINT_TAG: u8 = 0x10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: MlpArchitecture,
    pub seed: u64,
    /// Procedure that produced the parameters, e.g. `fedbn` or `staralign`.
    pub method: String,
    pub round: u32,
    /// Held-out target domain, when there is one.
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamVector,
    pub node_bn: BTreeMap<NodeId, Vec<f64>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(elem as u64).is_none_or(|b| b > remaining) {
            return Err(bad(format!("length {n} runs past the end of the checkpoint")));
        }
        Ok(n as usize)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    /// Errors unless the stored architecture is exactly `arch`.
    pub fn check_architecture(&self, arch: &MlpArchitecture) -> Result<()> {
        if &self.meta.architecture != arch {
            return Err(bad(format!(
                "architecture mismatch: checkpoint has {:?}, expected {:?}",
                self.meta.architecture, arch
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(CHECKPOINT_TAG);
        out.extend_from_slice(&self.meta.round.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let put = |out: &mut Vec<u8>, vals: &[f64]| {
            out.extend_from_slice(&(vals.len() as u64).to_le_bytes());
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&mut out, self.params.as_slice());
        out.extend_from_slice(&(self.node_bn.len() as u32).to_le_bytes());
        for (id, bn) in &self.node_bn {
            out.extend_from_slice(&id.0.to_le_bytes());
            put(&mut out, bn);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 4 + 22 {
            return Err(bad("truncated checkpoint"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        if crc32fast::hash(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        let mut c = Cursor { bytes: body, pos: 4 };
        let version = c.take(1)?[0];
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let tag = c.take(1)?[0];
        if tag != CHECKPOINT_TAG {
            return Err(bad(format!("tag {tag:#04x} is not a checkpoint")));
        }
        let round = c.u32()?;
        let _node = c.u32()?;
        let meta_len = c.len(1)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(c.take(meta_len)?).map_err(|e| bad(format!("metadata: {e}")))?;
        if meta.round != round {
            return Err(bad("header round disagrees with metadata"));
        }
        let layout = ParamLayout::for_architecture(&meta.architecture)?;
        let p = c.len(8)?;
        if p != layout.len() {
            return Err(bad(format!(
                "{p} parameters stored but the architecture has {}",
                layout.len()
            )));
        }
        let params = ParamVector::new(c.floats(p)?);
        let bn_len = layout.bn_ranges().iter().map(|r| r.len()).sum::<usize>();
        let blocks = c.u32()?;
        let mut node_bn = BTreeMap::new();
        for _ in 0..blocks {
            let id = NodeId(c.u32()?);
            let n = c.len(8)?;
            if n != bn_len {
                return Err(bad(format!("batch-norm block of {id} has {n} values, expected {bn_len}")));
            }
            if node_bn.insert(id, c.floats(n)?).is_some() {
                return Err(bad(format!("two batch-norm blocks for {id}")));
            }
        }
        if c.pos != body.len() {
            return Err(bad("trailing bytes in checkpoint"));
        }
        Ok(Checkpoint {
            meta,
            params,
            node_bn,
        })
    }

    /// Parameters with `node`'s own batch-norm block, if it has one.
    pub fn personalized(&self, node: NodeId) -> Result<ParamVector> {
        let mut p = self.params.clone();
        if let Some(bn) = self.node_bn.get(&node) {
            ParamLayout::for_architecture(&self.meta.architecture)?.insert_bn(p.as_mut_slice(), bn)?;
        }
        Ok(p)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.encode()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

/// Loads and insists on the expected architecture.
pub fn load_checkpoint_for(path: impl AsRef<Path>, arch: &MlpArchitecture) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_architecture(arch)?;
    Ok(ckpt)
}
