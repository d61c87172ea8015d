//! Binary checkpoints of parameters, optimizer moments and run metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PGCK"  u32 version  u32 tensor-count
//! per tensor: u16 name-len, name, u8 dtype, u8 trainable, u8 rank, rank × u64 dims, raw data
//! u32 CRC32 of every preceding byte
//! ```
//!
//! dtype 0 is `f32`, 1 is `f64`, 2 is `u64` (metadata only). Optimizer
//! moments are stored as `adam.m/<param>` and `adam.v/<param>`; the step
//! counter and config hash as `meta.step` and `meta.config_hash`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autograd::ParamStore;
use crate::objectives::{AdamW, Moments, TrainConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PGCK";
pub const VERSION: u32 = 1;
const DTYPE_U64: u8 = 2;
const STEP_KEY: &str = "meta.step";
const HASH_KEY: &str = "meta.config_hash";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("unsupported checkpoint version {0}, expected {VERSION}")]
    Version(u32),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("config hash mismatch: checkpoint {stored}, current {current}")]
    ConfigHash { stored: String, current: String },
    #[error("dtype {found} in checkpoint, expected {expected}")]
    Dtype { found: u8, expected: u8 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar = f32> {
    pub params: ParamStore<T>,
    pub moments: BTreeMap<String, Moments<T>>,
    pub step: u64,
    /// SHA-256 of the canonical config.
    pub config_hash: [u8; 32],
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(params: &ParamStore<T>, optimizer: Option<&AdamW<T>>, config_hash: [u8; 32]) -> Self {
        Self {
            params: params.clone(),
            moments: optimizer.map(|o| o.moments.clone()).unwrap_or_default(),
            step: optimizer.map_or(0, |o| o.step),
            config_hash,
        }
    }

    /// Rebuild an optimizer positioned at the saved step.
    pub fn optimizer(&self, config: TrainConfig) -> AdamW<T> {
        AdamW { config, step: self.step, moments: self.moments.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = self.params.len() + 2 * self.moments.len() + 2;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for p in self.params.iter() {
            write_tensor(&mut out, &p.name, p.trainable, &p.value);
        }
        for (name, m) in &self.moments {
            write_tensor(&mut out, &format!("{M_PREFIX}{name}"), false, &m.m);
            write_tensor(&mut out, &format!("{V_PREFIX}{name}"), false, &m.v);
        }
        write_u64s(&mut out, STEP_KEY, &[self.step]);
        let hash: Vec<u64> = self.config_hash.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        write_u64s(&mut out, HASH_KEY, &hash);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Crc { stored: 0, computed: crc32fast::hash(bytes) });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        if &body[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut m_map = BTreeMap::new();
        let mut v_map = BTreeMap::new();
        let mut step = None;
        let mut hash = None;
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let trainable = r.u8()? != 0;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            if dtype == DTYPE_U64 {
                let vals = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
                match name.as_str() {
                    STEP_KEY => step = vals.first().copied(),
                    HASH_KEY => {
                        let mut h = [0u8; 32];
                        for (chunk, v) in h.chunks_mut(8).zip(&vals) {
                            chunk.copy_from_slice(&v.to_le_bytes());
                        }
                        hash = Some(h);
                    }
                    _ => return Err(CheckpointError::Malformed(format!("unknown metadata `{name}`"))),
                }
                continue;
            }
            if dtype != T::DTYPE {
                return Err(CheckpointError::Dtype { found: dtype, expected: T::DTYPE });
            }
            let raw = r.take(n * T::BYTES)?;
            let data: Vec<T> = raw.chunks(T::BYTES).map(T::read_le).collect();
            if dims.is_empty() || dims.contains(&0) {
                return Err(CheckpointError::Malformed(format!("`{name}` has an empty shape")));
            }
            let t = Tensor::new(dims, data);
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                m_map.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                v_map.insert(p.to_string(), t);
            } else {
                if params.contains(&name) {
                    return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")));
                }
                params.insert(name, t, trainable);
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        let mut moments = BTreeMap::new();
        for (name, m) in m_map {
            let v = v_map
                .remove(&name)
                .ok_or_else(|| CheckpointError::Malformed(format!("second moment of `{name}` missing")))?;
            moments.insert(name, Moments { m, v });
        }
        Ok(Self {
            params,
            moments,
            step: step.ok_or_else(|| CheckpointError::Malformed("step counter missing".into()))?,
            config_hash: hash.ok_or_else(|| CheckpointError::Malformed("config hash missing".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Load for resuming; the config must hash to the stored value.
    pub fn load_for_resume(path: &Path, config_hash: [u8; 32]) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if ck.config_hash != config_hash {
            return Err(CheckpointError::ConfigHash { stored: hex(&ck.config_hash), current: hex(&config_hash) });
        }
        Ok(ck)
    }
}

fn write_header(out: &mut Vec<u8>, name: &str, dtype: u8, trainable: bool, dims: &[usize]) {
    let name = name.as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.push(dtype);
    out.push(trainable as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, trainable: bool, t: &Tensor<T>) {
    write_header(out, name, T::DTYPE, trainable, t.shape());
    for &v in t.data() {
        v.write_le(out);
    }
}

fn write_u64s(out: &mut Vec<u8>, name: &str, vals: &[u64]) {
    write_header(out, name, DTYPE_U64, false, &[vals.len()]);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Gradients;
    use crate::rng::derive;

    fn sample() -> Checkpoint<f32> {
        let mut store = ParamStore::new();
        let mut rng = derive(0, "ck", 0);
        store.insert("a.frozen", Tensor::randn(&[3, 2], 1.0, &mut rng), false);
        store.insert("b.prompt", Tensor::randn(&[4], 1.0, &mut rng), true);
        let mut moments = BTreeMap::new();
        moments.insert(
            "b.prompt".to_string(),
            Moments { m: Tensor::randn(&[4], 1.0, &mut rng), v: Tensor::filled(&[4], 0.5) },
        );
        Checkpoint { params: store, moments, step: 17, config_hash: [7u8; 32] }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let ck = sample();
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"PGCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 6);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 8);
        assert_eq!(&bytes[14..22], b"a.frozen");
        assert_eq!(bytes[22], 0);
    }

    #[test]
    fn truncated_or_corrupted_file_fails_crc() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(Checkpoint::<f32>::from_bytes(cut), Err(CheckpointError::Crc { .. })));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&flipped), Err(CheckpointError::Crc { .. })));
    }

    #[test]
    fn version_mismatch_reported() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn resume_checks_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        sample().save(&path).unwrap();
        assert!(Checkpoint::<f32>::load_for_resume(&path, [7u8; 32]).is_ok());
        assert!(matches!(
            Checkpoint::<f32>::load_for_resume(&path, [8u8; 32]),
            Err(CheckpointError::ConfigHash { .. })
        ));
    }

    #[test]
    fn optimizer_state_survives() {
        let ck = sample();
        let mut opt = ck.optimizer(TrainConfig::default());
        assert_eq!(opt.step, 17);
        let mut store = ck.params.clone();
        opt.update(&mut store, &Gradients::default());
        assert_eq!(store, ck.params);
    }

    #[test]
    fn f64_dtype_mismatch() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(CheckpointError::Dtype { found: 0, expected: 1 })));
    }
}
