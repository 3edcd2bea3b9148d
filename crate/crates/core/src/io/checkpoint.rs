//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "UNMKCKPT"
//! version    u32      1
//! meta_len   u32      length of the JSON metadata that follows
//! meta       bytes    {"kind": ..., "meta": ...}
//! n_blocks   u32
//! per block: u32 name_len, name bytes (UTF-8), u32 ndim, ndim x u64 dims,
//!            prod(dims) x f64 values
//! digest     32 bytes SHA-256 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::planner::{PlannerConfig, PlannerParams};
use crate::rng::from_seed;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UNMKCKPT";
const VERSION: u32 = 1;
const MAX_NAME: usize = 4096;
const MAX_DIMS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blocks: Vec<TensorBlock>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
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
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Checkpoint {
    pub fn from_params(kind: &str, meta: serde_json::Value, params: &dyn Parameters) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            meta,
            blocks: params
                .blocks()
                .into_iter()
                .map(|b| TensorBlock {
                    name: b.name,
                    shape: b.shape,
                    data: b.data.to_vec(),
                })
                .collect(),
        }
    }

    /// Copies the blocks into `params`, which must have identical names and shapes.
    pub fn apply_to(&self, params: &mut dyn Parameters) -> Result<()> {
        let mut targets = params.blocks_mut();
        if targets.len() != self.blocks.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} blocks, model expects {}",
                self.blocks.len(),
                targets.len()
            )));
        }
        for (t, b) in targets.iter_mut().zip(&self.blocks) {
            if t.name != b.name || t.shape != b.shape {
                return Err(Error::Format(format!(
                    "block {} {:?} does not match model block {} {:?}",
                    b.name, b.shape, t.name, t.shape
                )));
            }
            t.data.copy_from_slice(&b.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(Error::Format(format!("block {} shape/data mismatch", b.name)));
            }
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in &b.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and verifies a container; any corruption is a format or integrity error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Integrity("checkpoint digest mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut blocks = Vec::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            if name_len > MAX_NAME {
                return Err(Error::Format(format!("block name of {name_len} bytes")));
            }
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            if ndim > MAX_DIMS {
                return Err(Error::Format(format!("block {name} has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut count: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?;
                count = count
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format("block size overflow".into()))?;
                shape.push(d);
            }
            if count.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(Error::Format(format!("block {name} runs past the end of the file")));
            }
            let data = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push(TensorBlock { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            blocks,
        })
    }

    /// Hex SHA-256 trailer of the serialized container.
    pub fn digest(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

pub fn backbone_checkpoint(params: &BackboneParams) -> Result<Checkpoint> {
    Ok(Checkpoint::from_params(
        "backbone",
        serde_json::json!({ "config": serde_json::to_value(&params.config)? }),
        params,
    ))
}

pub fn backbone_from_checkpoint(ck: &Checkpoint) -> Result<BackboneParams> {
    ck.expect_kind("backbone")?;
    let config: BackboneConfig = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| Error::Format(format!("backbone config: {e}")))?;
    let mut params = BackboneParams::init(&config, &mut from_seed(0))?;
    ck.apply_to(&mut params)?;
    Ok(params)
}

pub fn save_backbone(params: &BackboneParams, path: &Path) -> Result<()> {
    backbone_checkpoint(params)?.save(path)
}

pub fn load_backbone(path: &Path) -> Result<BackboneParams> {
    backbone_from_checkpoint(&Checkpoint::load(path)?)
}

/// Planner checkpoints also record the digest of the backbone whose features they read.
pub fn planner_checkpoint(params: &PlannerParams, backbone_digest: &str) -> Result<Checkpoint> {
    Ok(Checkpoint::from_params(
        "planner",
        serde_json::json!({
            "config": serde_json::to_value(&params.config)?,
            "backbone_digest": backbone_digest,
        }),
        params,
    ))
}

/// Returns the planner and the backbone digest it was trained against.
pub fn planner_from_checkpoint(ck: &Checkpoint) -> Result<(PlannerParams, String)> {
    ck.expect_kind("planner")?;
    let config: PlannerConfig = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| Error::Format(format!("planner config: {e}")))?;
    let digest = ck.meta["backbone_digest"]
        .as_str()
        .ok_or_else(|| Error::Format("planner checkpoint lacks backbone_digest".into()))?
        .to_string();
    let mut params = PlannerParams::init(&config, &mut from_seed(0))?;
    ck.apply_to(&mut params)?;
    Ok((params, digest))
}

pub fn save_planner(params: &PlannerParams, backbone_digest: &str, path: &Path) -> Result<()> {
    planner_checkpoint(params, backbone_digest)?.save(path)
}

pub fn load_planner(path: &Path) -> Result<(PlannerParams, String)> {
    planner_from_checkpoint(&Checkpoint::load(path)?)
}
