//! Binary checkpoint container.
//!
//! ```text
//! magic    b"MIFOCKPT"
//! version  u32 LE
//! manifest u64 LE byte length, then UTF-8 JSON
//! count    u32 LE number of tensors
//! tensor   u32 LE name length, name bytes, u32 LE rank, rank × u64 LE dims,
//!          numel × f64 LE values
//! ```
//!
//! Tensor names carry a group prefix: `param/`, `adam_rl_m/`, `adam_rl_v/`,
//! `adam_sft_m/`, `adam_sft_v/`, `rl_start/`. All randomness is derived from
//! the master seed and the counters in [`Progress`], so those counters are
//! the complete RNG state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::engine::RealArray;
use crate::error::{Error, Result};
use crate::ledger::ImportanceLedger;
use crate::params::NamedParams;
use crate::sft::SftBuffer;

pub const MAGIC: &[u8; 8] = b"MIFOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// The supervised stage of `sft_then_rl` or the whole of `sft_only`.
    Sft,
    Rl,
    Done,
}

/// Loop position and counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub epoch: u64,
    /// Index into the epoch's question order.
    pub cursor: u64,
    pub rl_steps: u64,
    pub sft_steps: u64,
    pub sft_phases: u64,
    /// Last metrics step written.
    pub record_step: u64,
    /// Gradient-drop counter.
    pub drop_step: u64,
}

impl Progress {
    pub fn start(stage: Stage) -> Self {
        Self {
            stage,
            epoch: 0,
            cursor: 0,
            rl_steps: 0,
            sft_steps: 0,
            sft_phases: 0,
            record_step: 0,
            drop_step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub progress: Progress,
    pub ledger: Option<ImportanceLedger>,
    pub buffer: SftBuffer,
    pub adam_rl_steps: Vec<u64>,
    pub adam_sft_steps: Vec<u64>,
    /// Byte length of the metrics stream at save time.
    pub metrics_offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: NamedParams,
}

impl Checkpoint {
    /// Tensors under `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> Result<NamedParams> {
        let head = format!("{prefix}/");
        let mut out = NamedParams::new();
        for (name, a) in self.tensors.iter() {
            if let Some(rest) = name.strip_prefix(&head) {
                out.insert(rest, a.clone());
            }
        }
        if out.is_empty() {
            return Err(Error::Checkpoint(format!("no tensors in group `{prefix}`")));
        }
        Ok(out)
    }

    pub fn params(&self) -> Result<NamedParams> {
        self.group("param")
    }

    pub fn add_group(&mut self, prefix: &str, p: &NamedParams) {
        for (name, a) in p.iter() {
            self.tensors.insert(format!("{prefix}/{name}"), a.clone());
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(manifest.len() + 8 * self.tensors.num_coords() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, a) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in a.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let n = r.u32()?;
        let mut tensors = NamedParams::new();
        for _ in 0..n {
            let nl = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if tensors.contains(&name) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            tensors.insert(name, RealArray::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { manifest, tensors })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// half-written checkpoint in place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
