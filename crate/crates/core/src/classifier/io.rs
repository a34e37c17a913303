//! Binary model file.
//!
//! ```text
//! magic        8 bytes  "APSOFTMX"
//! version      u32
//! classes K    u32
//! features D   u32
//! roster       K x (u32 byte length, UTF-8 name)
//! seed         u64
//! epochs       u32
//! batch size   u32
//! learn rate   f64
//! scaler mean  D x f64
//! scaler 1/std D x f64
//! weights      K x (D + 1) x f64, row-major, bias last
//! ```
//!
//! All integers and floats are little-endian; floats are stored as f64
//! regardless of the in-memory scalar type.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::softmax::{FeatureScaler, SoftmaxModel, TrainingMeta};
use crate::error::{Error, Result};
use crate::num::Scalar;

const MAGIC: &[u8; 8] = b"APSOFTMX";
pub const MODEL_FORMAT_VERSION: u32 = 1;

impl<F: Scalar> SoftmaxModel<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for name in self.roster() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        let meta = self.meta();
        out.extend_from_slice(&meta.seed.to_le_bytes());
        out.extend_from_slice(&meta.epochs.to_le_bytes());
        out.extend_from_slice(&meta.batch_size.to_le_bytes());
        out.extend_from_slice(&meta.learning_rate.to_le_bytes());
        let floats = self
            .scaler()
            .mean
            .iter()
            .chain(&self.scaler().inv_std)
            .chain(self.weights());
        for v in floats {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CorruptModel("bad magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::CorruptModel(format!("unsupported format version {version}")));
        }
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut roster = Vec::with_capacity(k.min(1024));
        for _ in 0..k {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptModel("class name is not UTF-8".into()))?;
            roster.push(name.to_owned());
        }
        let meta = TrainingMeta {
            seed: r.u64()?,
            epochs: r.u32()?,
            batch_size: r.u32()?,
            learning_rate: r.f64()?,
        };
        let mut floats = |n: usize| -> Result<Vec<F>> { (0..n).map(|_| r.f64().map(F::of)).collect() };
        let mean = floats(dim)?;
        let inv_std = floats(dim)?;
        let weights = floats(k * (dim + 1))?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptModel("trailing bytes".into()));
        }
        SoftmaxModel::from_parts(roster, dim, weights, FeatureScaler { mean, inv_std }, meta)
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
            .ok_or_else(|| Error::CorruptModel("truncated".into()))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_model<F: Scalar>(model: &SoftmaxModel<F>, path: &Path) -> Result<()> {
    crate::store::write_atomic(path, &model.to_bytes())
}

pub fn load_model<F: Scalar>(path: &Path) -> Result<SoftmaxModel<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    SoftmaxModel::from_bytes(&bytes)
}

/// Content hash identifying a trained model; used to key cached scores.
pub fn model_version<F: Scalar>(model: &SoftmaxModel<F>) -> String {
    hex::encode(&Sha256::digest(model.to_bytes())[..8])
}
