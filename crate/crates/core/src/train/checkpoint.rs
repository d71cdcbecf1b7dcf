//! Binary checkpoint container.
//!
//! All integers and floats are little-endian. Field order:
//!
//! ```text
//! magic            8 bytes  "MAPFUSCK"
//! version          u32
//! model config     u64 length + UTF-8 JSON
//! train config     u64 length + UTF-8 JSON
//! epochs done      u64
//! parameter count  u64
//!   per parameter: u64 name length + UTF-8 name, u64 rank, rank × u64 dims,
//!                  f64 values (row-major)
//! adam step        u64
//!   per parameter: f64 first moments, then f64 second moments
//! rng              32-byte seed, u64 stream, u128 word position
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Init, ParamStore};
use crate::net::{Model, ModelConfig};

use super::adam::AdamState;
use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAPFUSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file")]
    Magic { path: PathBuf },
    #[error("{path}: checkpoint version {found}, this build reads version {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: file is truncated")]
    Truncated { path: PathBuf },
    #[error("{path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Epochs of the flattened schedule already completed.
    pub epochs_done: usize,
    /// Data-order and augmentation stream, positioned after the last
    /// completed epoch.
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model, crate::net::NetError> {
        Model::new(self.model_config.clone(), &mut ParamStore::new(), &mut Init::Zeros)
    }

    /// The serialized form; two checkpoints are bit-identical exactly when
    /// their bytes are equal.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let texts = [
            serde_json::to_string(&self.model_config).expect("configs serialize"),
            serde_json::to_string(&self.train_config).expect("configs serialize"),
        ];
        for text in texts {
            put_u64(&mut b, text.len() as u64);
            b.extend_from_slice(text.as_bytes());
        }
        put_u64(&mut b, self.epochs_done as u64);
        put_u64(&mut b, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_u64(&mut b, name.len() as u64);
            b.extend_from_slice(name.as_bytes());
            put_u64(&mut b, t.shape().len() as u64);
            for d in t.shape() {
                put_u64(&mut b, *d as u64);
            }
            put_f64s(&mut b, t.data());
        }
        put_u64(&mut b, self.adam.step);
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            put_f64s(&mut b, m.data());
            put_f64s(&mut b, v.data());
        }
        b.extend_from_slice(&self.rng.get_seed());
        put_u64(&mut b, self.rng.get_stream());
        b.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic { path: path.into() });
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                path: path.into(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let model_config: ModelConfig = r.json()?;
        let train_config: TrainConfig = r.json()?;
        let epochs_done = r.u64()? as usize;

        // The model rebuilds the expected parameter layout.
        let mut params = ParamStore::new();
        Model::new(model_config.clone(), &mut params, &mut Init::Zeros).map_err(|e| r.corrupt(e.to_string()))?;
        let count = r.u64()? as usize;
        if count != params.len() {
            return Err(r.corrupt(format!("{count} parameters, model has {}", params.len())));
        }
        let ids: Vec<_> = params.ids().collect();
        for id in &ids {
            let len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| r.corrupt(e.to_string()))?
                .to_string();
            if name != params.name(*id) {
                return Err(r.corrupt(format!("parameter {name:?}, expected {:?}", params.name(*id))));
            }
            let rank = r.u64()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if shape != params.get(*id).shape() {
                return Err(r.corrupt(format!("parameter {name:?} has shape {shape:?}")));
            }
            let data = r.f64s(params.get(*id).len())?;
            params.get_mut(*id).data_mut().copy_from_slice(&data);
        }
        let mut adam = AdamState::new(&params);
        adam.step = r.u64()?;
        for ((m, v), id) in adam.m.iter_mut().zip(adam.v.iter_mut()).zip(&ids) {
            let n = params.get(*id).len();
            m.data_mut().copy_from_slice(&r.f64s(n)?);
            v.data_mut().copy_from_slice(&r.f64s(n)?);
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.at != bytes.len() {
            return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            model_config,
            train_config,
            params,
            adam,
            epochs_done,
            rng,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.into(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated { path: self.path.into() });
        };
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T, CheckpointError> {
        let len = self.u64()? as usize;
        let raw = self.take(len)?;
        serde_json::from_slice(raw).map_err(|e| self.corrupt(e.to_string()))
    }

    fn corrupt(&self, msg: String) -> CheckpointError {
        CheckpointError::Corrupt {
            path: self.path.into(),
            msg,
        }
    }
}
