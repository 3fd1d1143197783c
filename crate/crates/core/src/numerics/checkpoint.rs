//! On-disk parameter snapshots.
//!
//! Byte layout, all integers little-endian `u32`:
//!
//! ```text
//! magic     8 bytes  "CADZCKPT"
//! version   u32      1
//! cfg_len   u32      length of the JSON config that follows
//! config    cfg_len bytes of UTF-8 JSON
//! count     u32      number of records
//! record*   name_len u32, name (UTF-8), ndim u32, dims (u32 each),
//!           product(dims) f32 values
//! ```

use std::path::Path;

use serde_json::Value;

use super::adam::Adam;
use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use super::NumericsError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CADZCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_STEP: &str = "adam.step";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(config: Value) -> Self {
        Self {
            config,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.records.push(Record {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Snapshot of model parameters and, optionally, optimizer state.
    pub fn capture<T: Scalar>(config: Value, store: &ParamStore<T>, adam: Option<&Adam<T>>) -> Self {
        let mut ckpt = Self::new(config);
        let f32s = |xs: &[T]| xs.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        for (name, t) in store.iter() {
            ckpt.push(name, t.shape(), f32s(t.data()));
        }
        if let Some(adam) = adam {
            for (i, (name, t)) in store.iter().enumerate() {
                ckpt.push(format!("{ADAM_M}{name}"), t.shape(), f32s(&adam.m[i]));
                ckpt.push(format!("{ADAM_V}{name}"), t.shape(), f32s(&adam.v[i]));
            }
            // step counter stored bit-for-bit as two 32-bit halves
            let halves = vec![f32::from_bits(adam.step as u32), f32::from_bits((adam.step >> 32) as u32)];
            ckpt.push(ADAM_STEP, &[2], halves);
        }
        ckpt
    }

    /// Loads every parameter of `store` from this checkpoint; shapes must match.
    pub fn restore_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), NumericsError> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let r = self
                .get(&name)
                .ok_or_else(|| NumericsError::Format(format!("missing parameter `{name}`")))?;
            store.set(&name, &r.shape, r.data.iter().map(|&x| T::of(x as f64)).collect())?;
        }
        Ok(())
    }

    /// Restores optimizer moments and step counter when present.
    pub fn restore_adam<T: Scalar>(&self, store: &ParamStore<T>, adam: &mut Adam<T>) -> Result<bool, NumericsError> {
        let Some(counter) = self.get(ADAM_STEP).filter(|r| r.data.len() == 2) else {
            return Ok(false);
        };
        let step = counter.data[0].to_bits() as u64 | ((counter.data[1].to_bits() as u64) << 32);
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in store.iter() {
            for (prefix, out) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                let r = self
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| NumericsError::Format(format!("missing optimizer state for `{name}`")))?;
                if r.shape != t.shape() {
                    return Err(NumericsError::Shape(format!("optimizer state for `{name}`")));
                }
                out.push(r.data.iter().map(|&x| T::of(x as f64)).collect());
            }
        }
        adam.restore(step, m, v);
        Ok(true)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        let r = self.get(name)?;
        Tensor::new(&r.shape, r.data.iter().map(|&x| T::of(x as f64)).collect()).ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, x: u32| out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put(&mut out, CHECKPOINT_VERSION);
        let cfg = serde_json::to_vec(&self.config).expect("json value serializes");
        put(&mut out, cfg.len() as u32);
        out.extend_from_slice(&cfg);
        put(&mut out, self.records.len() as u32);
        for r in &self.records {
            put(&mut out, r.name.len() as u32);
            out.extend_from_slice(r.name.as_bytes());
            put(&mut out, r.shape.len() as u32);
            for &d in &r.shape {
                put(&mut out, d as u32);
            }
            for x in &r.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(NumericsError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NumericsError::Version(version));
        }
        let cfg_len = cur.u32()? as usize;
        let config = serde_json::from_slice(cur.take(cfg_len)?)
            .map_err(|e| NumericsError::Format(format!("config: {e}")))?;
        let count = cur.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| NumericsError::Format("record name is not UTF-8".into()))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| NumericsError::Format(format!("record `{name}` too large")))?;
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| NumericsError::Format("overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(Record { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(NumericsError::Format(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NumericsError::Format(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
