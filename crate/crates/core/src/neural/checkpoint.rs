//! Binary network checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "CHDA-MLP"
//! version    u8       1
//! role       u8       0 = actor, 1 = critic
//! n_sizes    u32      followed by n_sizes x u32 layer widths
//! n_scales   u32      followed by n_scales x f64 input normalisation scales
//! params     f64      per layer: weights (out x in, row-major) then biases
//! n_extra    u32      followed by n_extra x f64 (the actor's log-std vector)
//! ```

use std::path::Path;

use super::Mlp;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CHDA-MLP";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Actor = 0,
    Critic = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub net: Mlp,
    pub input_scales: Vec<f64>,
    pub extra: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes = self.net.layer_sizes();
        let mut out = Vec::with_capacity(
            24 + 4 * sizes.len() + 8 * (self.net.param_count() + self.input_scales.len() + self.extra.len()),
        );
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.role as u8);
        out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for &s in sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.input_scales.len() as u32).to_le_bytes());
        for v in &self.input_scales {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.net.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.extra.len() as u32).to_le_bytes());
        for v in &self.extra {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let role = match r.take(1)?[0] {
            0 => Role::Actor,
            1 => Role::Critic,
            t => return Err(Error::Checkpoint(format!("unknown role tag {t}"))),
        };
        let n_sizes = r.u32()? as usize;
        let sizes = (0..n_sizes)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n_scales = r.u32()? as usize;
        let input_scales = r.f64s(n_scales)?;
        let n_params = Mlp::zeros(&sizes)
            .map_err(|e| Error::Checkpoint(format!("invalid layer manifest: {e}")))?
            .param_count();
        let params = r.f64s(n_params)?;
        let n_extra = r.u32()? as usize;
        let extra = r.f64s(n_extra)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            role,
            net: Mlp::from_params(&sizes, params)?,
            input_scales,
            extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
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
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
