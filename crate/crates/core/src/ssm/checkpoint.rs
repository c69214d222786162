//! Binary model checkpoint.
//!
//! Layout (little-endian): `"RSSM"`, version `u16`, vocab/embed/state/layers
//! as `u32`, seed `u64`, precision tag `u8`, every tensor as `f32` in
//! declaration order, then a SHA-256 digest of all preceding bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::{ModelConfig, Precision};
use super::params::{ModelParams, ParamTensors};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RSSM";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + 4 * params.tensors.num_scalars());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for field in [c.vocab_size, c.embed_dim, c.state_dim, c.num_layers] {
        out.extend_from_slice(&(field as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.rng_seed.to_le_bytes());
    out.push(c.precision.tag());
    params.tensors.for_each_slice(|s| {
        for v in s {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    });
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint into parameters of scalar type `T`.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let vocab_size = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let state_dim = r.u32()? as usize;
    let num_layers = r.u32()? as usize;
    let rng_seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let precision = Precision::from_tag(r.take(1)?[0]).ok_or_else(|| Error::Format("unknown precision tag".into()))?;
    let config = ModelConfig {
        vocab_size,
        embed_dim,
        state_dim,
        num_layers,
        rng_seed,
        precision,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;

    let mut tensors = ParamTensors::<T>::zeros(&config);
    let count = tensors.num_scalars();
    let body_len = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
    let body = r.take(body_len)?;
    let flat: Vec<T> = body
        .chunks_exact(4)
        .map(|c| T::from_f32_exact(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    tensors.assign_flat(&flat)?;

    let covered = r.pos;
    let stored = r.take(32)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after digest",
            bytes.len() - r.pos
        )));
    }
    let digest: [u8; 32] = Sha256::digest(&bytes[..covered]).into();
    if digest[..] != stored[..] {
        return Err(Error::Fingerprint);
    }
    ModelParams::from_tensors(config, tensors).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
