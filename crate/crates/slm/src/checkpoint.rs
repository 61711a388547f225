//! Checkpoint container format.
//!
//! Layout: magic `SLMC`, format version u16, 32-byte config fingerprint,
//! record count u32, then per record: name length u32 + name bytes, dtype
//! tag u8 (f32=0, f64=1), rank u8, extents as u64 list, trainable flag u8,
//! and the payload in little-endian element order. All integers are
//! little-endian. Save and load round-trip byte-identically.
//!
//! The parser must survive arbitrary bytes: every length is validated
//! against the remaining input before any allocation sized by it.

use crate::error::{Result, SlmError};
use crate::optim::Adam;
use crate::params::ParameterStore;
use crate::scalar::{Dtype, Scalar};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"SLMC";
pub const VERSION: u16 = 1;

/// Upper bound on record name length; longer names mean a corrupt file.
const MAX_NAME_LEN: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub name: String,
    pub dtype: Dtype,
    pub extents: Vec<u64>,
    pub trainable: bool,
    pub payload: Vec<u8>,
}

impl RawRecord {
    pub fn from_values<S: Scalar>(name: &str, extents: &[u64], trainable: bool, values: &[S]) -> Self {
        debug_assert_eq!(
            extents.iter().product::<u64>() as usize,
            values.len(),
            "extents/value mismatch for {name}"
        );
        let mut payload = Vec::with_capacity(values.len() * S::DTYPE.byte_width());
        for &v in values {
            v.write_le(&mut payload);
        }
        RawRecord {
            name: name.to_string(),
            dtype: S::DTYPE,
            extents: extents.to_vec(),
            trainable,
            payload,
        }
    }

    pub fn element_count(&self) -> usize {
        self.payload.len() / self.dtype.byte_width()
    }

    pub fn values<S: Scalar>(&self) -> Result<Vec<S>> {
        if self.dtype != S::DTYPE {
            return Err(SlmError::Checkpoint(format!(
                "tensor {:?} is {}, run precision is {}",
                self.name,
                self.dtype.name(),
                S::DTYPE.name()
            )));
        }
        let w = self.dtype.byte_width();
        Ok(self.payload.chunks_exact(w).map(S::read_le).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub records: Vec<RawRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SlmError::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(fingerprint: [u8; 32]) -> Self {
        Checkpoint {
            fingerprint,
            records: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype as u8);
            out.push(r.extents.len() as u8);
            for &e in &r.extents {
                out.extend_from_slice(&e.to_le_bytes());
            }
            out.push(r.trainable as u8);
            out.extend_from_slice(&r.payload);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(SlmError::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(SlmError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            if name_len > MAX_NAME_LEN {
                return Err(SlmError::Checkpoint(format!("name length {name_len} too large")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| SlmError::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let dtype = Dtype::from_tag(r.u8()?)
                .ok_or_else(|| SlmError::Checkpoint(format!("bad dtype tag in {name:?}")))?;
            let rank = r.u8()? as usize;
            let mut extents = Vec::with_capacity(rank.min(16));
            let mut elements: u128 = 1;
            for _ in 0..rank {
                let e = r.u64()?;
                elements = elements.saturating_mul(e as u128);
                extents.push(e);
            }
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                x => {
                    return Err(SlmError::Checkpoint(format!(
                        "bad trainable flag {x} in {name:?}"
                    )))
                }
            };
            let payload_len = elements.saturating_mul(dtype.byte_width() as u128);
            if payload_len > (bytes.len() - r.pos) as u128 {
                return Err(SlmError::Checkpoint(format!(
                    "tensor {name:?} claims {payload_len} payload bytes, {} remain",
                    bytes.len() - r.pos
                )));
            }
            let payload = r.take(payload_len as usize)?.to_vec();
            records.push(RawRecord {
                name,
                dtype,
                extents,
                trainable,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(SlmError::Checkpoint(format!(
                "{} trailing bytes after last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { fingerprint, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SlmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| SlmError::io(path, e))?;
        Checkpoint::parse(&bytes)
    }

    pub fn record(&self, name: &str) -> Option<&RawRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn expect_fingerprint(&self, fp: [u8; 32]) -> Result<()> {
        if self.fingerprint != fp {
            return Err(SlmError::Checkpoint(
                "config fingerprint mismatch: checkpoint was written under a different architecture"
                    .into(),
            ));
        }
        Ok(())
    }

    // ── parameter store and optimizer round-trips ──

    /// Append every parameter in store order.
    pub fn push_store<S: Scalar>(&mut self, store: &ParameterStore<S>) {
        for p in store.iter() {
            self.records.push(RawRecord::from_values(
                &p.name,
                &[p.rows as u64, p.cols as u64],
                p.trainable,
                &p.data,
            ));
        }
    }

    /// Append optimizer state under the reserved `optim.` name prefix.
    pub fn push_adam<S: Scalar>(&mut self, adam: &Adam<S>) {
        self.records.push(RawRecord::from_values(
            "optim.step",
            &[1],
            false,
            &[S::from_f64(adam.step as f64)],
        ));
        for (name, m, v) in adam.entries() {
            self.records
                .push(RawRecord::from_values(&format!("optim.m.{name}"), &[m.len() as u64], false, m));
            self.records
                .push(RawRecord::from_values(&format!("optim.v.{name}"), &[v.len() as u64], false, v));
        }
    }

    /// Overwrite data and trainability of every tensor in `store` from the
    /// matching records. Every model tensor must be present with matching
    /// extents; non-`optim.` records that match nothing are an error.
    pub fn apply_to_store<S: Scalar>(&self, store: &mut ParameterStore<S>) -> Result<()> {
        for p in store.iter_mut() {
            let r = self
                .records
                .iter()
                .find(|r| r.name == p.name)
                .ok_or_else(|| SlmError::Checkpoint(format!("missing tensor {:?}", p.name)))?;
            if r.extents != [p.rows as u64, p.cols as u64] {
                return Err(SlmError::Checkpoint(format!(
                    "tensor {:?}: extents {:?} do not match model shape {}x{}",
                    p.name, r.extents, p.rows, p.cols
                )));
            }
            p.data = r.values()?;
            p.trainable = r.trainable;
            p.grad = None;
        }
        // optim.* is optimizer state, meta.* is sidecar data (loss history);
        // anything else unknown means a model/checkpoint mismatch
        for r in &self.records {
            if !r.name.starts_with("optim.")
                && !r.name.starts_with("meta.")
                && store.get(&r.name).is_none()
            {
                return Err(SlmError::Checkpoint(format!(
                    "unexpected tensor {:?} not present in model",
                    r.name
                )));
            }
        }
        Ok(())
    }

    /// Rebuild optimizer state saved by `push_adam`. Without such records
    /// the optimizer is returned fresh at step 0.
    pub fn restore_adam<S: Scalar>(&self, lr: f64) -> Result<Adam<S>> {
        let mut adam = Adam::new(lr);
        if let Some(step) = self.record("optim.step") {
            let v: Vec<S> = step.values()?;
            if v.len() != 1 {
                return Err(SlmError::Checkpoint("malformed optim.step record".into()));
            }
            adam.step = v[0].to_f64() as usize;
        }
        for r in &self.records {
            if let Some(name) = r.name.strip_prefix("optim.m.") {
                let m = r.values()?;
                let v_rec = self
                    .record(&format!("optim.v.{name}"))
                    .ok_or_else(|| SlmError::Checkpoint(format!("optim.v missing for {name:?}")))?;
                let v = v_rec.values()?;
                if v.len() != m.len() {
                    return Err(SlmError::Checkpoint(format!(
                        "optimizer moment lengths differ for {name:?}"
                    )));
                }
                adam.restore_entry(name, m, v);
            }
        }
        Ok(adam)
    }
}
