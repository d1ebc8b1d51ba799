//! Self-describing binary checkpoint.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, the tensors listed in the header as little-endian `f64`, and a
//! trailing SHA-256 of every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DenoiserConfig, TrainConfig};
use super::preprocessor::{Preprocessor, PreprocessorConfig};
use super::train::OptimState;
use super::transformer::Denoiser;
use crate::data::NormalizationParams;
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};

const MAGIC: &[u8; 8] = b"TMDIFFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimHeader {
    epoch: usize,
    iter: u64,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleIdentity {
    kind: ScheduleKind,
    steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    denoiser: DenoiserConfig,
    schedule: ScheduleIdentity,
    normalization: Option<NormalizationParams>,
    train: Option<TrainConfig>,
    optim: Option<OptimHeader>,
    preprocessor: Option<PreprocessorConfig>,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to sample from it or resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub normalization: Option<NormalizationParams>,
    pub train_config: Option<TrainConfig>,
    pub optim: Option<OptimState>,
    pub preprocessor: Option<Preprocessor>,
    /// Free-form provenance such as the resolved run configuration.
    pub metadata: BTreeMap<String, String>,
}

fn push_store(prefix: &str, store: &ParamStore, entries: &mut Vec<TensorEntry>, data: &mut Vec<Array2<f64>>) {
    for (name, v) in store.names().iter().zip(store.iter()) {
        entries.push(TensorEntry {
            name: format!("{prefix}/{name}"),
            rows: v.nrows(),
            cols: v.ncols(),
        });
        data.push(v.clone());
    }
}

impl Checkpoint {
    pub fn new(denoiser: Denoiser, schedule: NoiseSchedule) -> Result<Self> {
        if schedule.steps() != denoiser.config().diffusion_steps {
            return Err(Error::validation(format!(
                "schedule has {} steps, model expects {}",
                schedule.steps(),
                denoiser.config().diffusion_steps
            )));
        }
        Ok(Self {
            denoiser,
            schedule,
            normalization: None,
            train_config: None,
            optim: None,
            preprocessor: None,
            metadata: BTreeMap::new(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data = Vec::new();
        let betas: Vec<f64> = (0..=self.schedule.steps()).map(|t| self.schedule.beta(t)).collect();
        entries.push(TensorEntry {
            name: "schedule/beta".into(),
            rows: 1,
            cols: betas.len(),
        });
        data.push(Array2::from_shape_vec((1, betas.len()), betas).expect("row vector"));
        push_store("denoiser", self.denoiser.params(), &mut entries, &mut data);
        if let Some(o) = &self.optim {
            for (prefix, moments) in [("adam_m", &o.adam.m), ("adam_v", &o.adam.v)] {
                for (name, v) in self.denoiser.params().names().iter().zip(moments) {
                    entries.push(TensorEntry {
                        name: format!("{prefix}/{name}"),
                        rows: v.nrows(),
                        cols: v.ncols(),
                    });
                    data.push(v.clone());
                }
            }
        }
        if let Some(p) = &self.preprocessor {
            push_store("preprocessor", p.params(), &mut entries, &mut data);
        }
        let header = Header {
            denoiser: self.denoiser.config().clone(),
            schedule: ScheduleIdentity {
                kind: self.schedule.kind(),
                steps: self.schedule.steps(),
            },
            normalization: self.normalization,
            train: self.train_config.clone(),
            optim: self.optim.as_ref().map(|o| OptimHeader {
                epoch: o.epoch,
                iter: o.iter,
                step: o.adam.step,
                beta1: o.adam.beta1,
                beta2: o.adam.beta2,
                eps: o.adam.eps,
            }),
            preprocessor: self.preprocessor.as_ref().map(|p| p.config().clone()),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 8 * data.iter().map(|d| d.len()).sum::<usize>() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for d in &data {
            for v in d.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch; the file is corrupted or truncated"));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| bad("header length out of range"))?;
        let header: Header =
            serde_json::from_slice(&body[20..header_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.denoiser.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut payload = &body[header_end..];
        let mut tensors: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for t in &header.tensors {
            let n = t.rows.checked_mul(t.cols).ok_or_else(|| bad("tensor size overflow"))?;
            if payload.len() < 8 * n {
                return Err(Error::Checkpoint(format!("payload ends inside tensor {}", t.name)));
            }
            let (chunk, rest) = payload.split_at(8 * n);
            let vals = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(t.name.clone(), Array2::from_shape_vec((t.rows, t.cols), vals).expect("sized"));
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")));
        let betas = take("schedule/beta")?.into_raw_vec_and_offset().0;
        let schedule = match header.schedule.kind {
            ScheduleKind::Cosine => NoiseSchedule::cosine(header.schedule.steps)?,
            ScheduleKind::Custom => NoiseSchedule::from_betas(betas.clone())?,
        };
        if schedule.steps() != header.schedule.steps
            || (0..=schedule.steps()).any(|t| schedule.beta(t).to_bits() != betas[t].to_bits())
        {
            return Err(bad("stored schedule does not match its identity"));
        }

        let mut denoiser = Denoiser::new(header.denoiser.clone(), 0)?;
        let names = denoiser.params().names().to_vec();
        let weights = names.iter().map(|n| take(&format!("denoiser/{n}"))).collect::<Result<Vec<_>>>()?;
        denoiser.set_weights(weights)?;

        let optim = match &header.optim {
            Some(o) => {
                let m = names.iter().map(|n| take(&format!("adam_m/{n}"))).collect::<Result<Vec<_>>>()?;
                let v = names.iter().map(|n| take(&format!("adam_v/{n}"))).collect::<Result<Vec<_>>>()?;
                Some(OptimState {
                    adam: Adam {
                        beta1: o.beta1,
                        beta2: o.beta2,
                        eps: o.eps,
                        step: o.step,
                        m,
                        v,
                    },
                    epoch: o.epoch,
                    iter: o.iter,
                })
            }
            None => None,
        };

        let preprocessor = match &header.preprocessor {
            Some(cfg) => {
                let mut p = Preprocessor::new(cfg.clone(), 0)?;
                let names = p.params().names().to_vec();
                let w = names.iter().map(|n| take(&format!("preprocessor/{n}"))).collect::<Result<Vec<_>>>()?;
                p.set_weights(w)?;
                Some(p)
            }
            None => None,
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }

        Ok(Self {
            denoiser,
            schedule,
            normalization: header.normalization,
            train_config: header.train,
            optim,
            preprocessor,
            metadata: header.metadata,
        })
    }

    /// Writes to a sibling temporary file first so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and refuses a checkpoint whose model shape differs from `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &DenoiserConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.denoiser.config() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds model {:?}, expected {:?}",
                ck.denoiser.config(),
                expected
            )));
        }
        Ok(ck)
    }
}
