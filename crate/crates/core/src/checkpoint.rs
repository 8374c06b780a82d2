//! Parameter archives.
//!
//! Layout: magic `STCK`, little-endian `u32` version, `u64` header length,
//! a JSON header, then every value as little-endian `f64`: parameters in
//! store order, followed by Adam first and second moments when present.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const STCK_MAGIC: &[u8; 4] = b"STCK";
pub const STCK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    epoch: usize,
    step: u64,
    tensors: Vec<TensorHeader>,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
}

/// Everything needed to restore or resume a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub store: ParamStore<S>,
    pub optimizer: Option<Adam<S>>,
    /// Free-form JSON, typically the model configuration.
    pub meta: serde_json::Value,
}

impl<S: Scalar> Checkpoint<S> {
    /// Named parameter values, ready for [`ParamStore::load_values`].
    pub fn values(&self) -> BTreeMap<String, Matrix<S>> {
        self.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            epoch: self.epoch,
            step: self.step,
            tensors: self
                .store
                .entries()
                .iter()
                .map(|e| TensorHeader {
                    name: e.name.clone(),
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                    trainable: e.trainable,
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                config: a.config,
                step: a.step,
            }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.store.num_scalars() * 3);
        out.extend_from_slice(STCK_MAGIC);
        out.extend_from_slice(&STCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |m: &Matrix<S>| {
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_f64().unwrap().to_le_bytes());
            }
        };
        for e in self.store.entries() {
            push(&e.value);
        }
        if let Some(adam) = &self.optimizer {
            if adam.first.len() != self.store.len() || adam.second.len() != self.store.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameter store".into()));
            }
            adam.first.iter().for_each(&mut push);
            adam.second.iter().for_each(&mut push);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated { expected: 16, found: bytes.len() });
        }
        if &bytes[..4] != STCK_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(STCK_MAGIC).into(),
                found: String::from_utf8_lossy(&bytes[..4]).into(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != STCK_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or(Error::Truncated { expected: 16 + header_len, found: bytes.len() })?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;

        let scalars: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        let copies = if header.optimizer.is_some() { 3 } else { 1 };
        let expected = body + 8 * scalars * copies;
        if bytes.len() != expected {
            return Err(Error::Truncated { expected, found: bytes.len() });
        }
        let mut cursor = body;
        let mut read = |rows: usize, cols: usize| -> Result<Matrix<S>> {
            let n = rows * cols;
            let mut data = Vec::with_capacity(n);
            for k in 0..n {
                let at = cursor + 8 * k;
                let x = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
                if !x.is_finite() {
                    return Err(Error::NonFinite((at - body) / 8));
                }
                data.push(S::lit(x));
            }
            cursor += 8 * n;
            Ok(Matrix::from_vec(rows, cols, data))
        };

        let mut store = ParamStore::new();
        for t in &header.tensors {
            let value = read(t.rows, t.cols)?;
            store.add(t.name.clone(), value, t.trainable);
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut adam = Adam::new(o.config, &store);
                adam.step = o.step;
                for (i, t) in header.tensors.iter().enumerate() {
                    adam.first[i] = read(t.rows, t.cols)?;
                }
                for (i, t) in header.tensors.iter().enumerate() {
                    adam.second[i] = read(t.rows, t.cols)?;
                }
                Some(adam)
            }
            None => None,
        };
        Ok(Self {
            epoch: header.epoch,
            step: header.step,
            store,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_optimizer: bool) -> Checkpoint<f64> {
        let mut store = ParamStore::new();
        store.add("a.weight", Matrix::from_fn(2, 3, |r, c| r as f64 - 0.5 * c as f64), true);
        store.add("a.bias", Matrix::from_vec(1, 3, vec![1e-300, -0.0, 3.25]), false);
        let optimizer = with_optimizer.then(|| {
            let mut adam = Adam::new(AdamConfig::default(), &store);
            adam.step = 7;
            adam.first[0] = Matrix::filled(2, 3, 0.125);
            adam.second[1] = Matrix::filled(1, 3, 2.0);
            adam
        });
        Checkpoint {
            epoch: 3,
            step: 24,
            store,
            optimizer,
            meta: serde_json::json!({"note": "x"}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for opt in [false, true] {
            let ck = sample(opt);
            assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
        }
    }

    #[test]
    fn f32_values_survive() {
        let ck = sample(true);
        let mut store32 = ParamStore::<f32>::new();
        for e in ck.store.entries() {
            store32.add(e.name.clone(), e.value.cast(), e.trainable);
        }
        let ck32 = Checkpoint { epoch: 1, step: 2, store: store32, optimizer: None, meta: serde_json::Value::Null };
        assert_eq!(Checkpoint::<f32>::decode(&ck32.encode().unwrap()).unwrap(), ck32);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = sample(true).encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f64>::decode(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::<f64>::decode(&bad), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(Checkpoint::<f64>::decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(Checkpoint::<f64>::decode(&bad), Err(Error::NonFinite(_))));
    }
}
