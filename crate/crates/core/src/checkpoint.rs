//! Binary checkpoints: parameters, Adam moments, counters and generator
//! state, guarded by a model-config digest and a SHA-256 trailer.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, tensor bytes (little-endian, in header order), 32-byte SHA-256
//! of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::network::{Denoiser, ModelConfig};
use crate::training::{Adam, AdamSlot, TrainState};

const MAGIC: &[u8; 8] = b"DDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed generator state".into());
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-parameter Adam step counts.
    pub steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Digest of the model-defining configuration; see `config::model_hash`.
    pub config_hash: String,
    /// Digest of the full run configuration that produced this file.
    pub run_config_hash: String,
    pub model: ModelConfig,
    pub num_steps: usize,
    pub schedule: ScheduleKind,
    pub step: u64,
    pub epoch: u64,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub rng: RngState,
    pub optimizer: OptimizerMeta,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<u8>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

/// Identifies the training run a checkpoint belongs to.
#[derive(Debug, Clone)]
pub struct CheckpointContext<'a> {
    pub config_hash: &'a str,
    pub run_config_hash: &'a str,
    pub num_steps: usize,
    pub schedule: ScheduleKind,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, ctx: &CheckpointContext<'_>) -> Result<Self> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut push = |name: &str, kind: TensorKind, t: &Tensor, tensors: &mut Vec<TensorEntry>| -> Result<()> {
            let bytes = tensor_bytes(t)?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: data.len() as u64,
                nbytes: bytes.len() as u64,
            });
            data.extend_from_slice(&bytes);
            Ok(())
        };
        for (name, var) in state.model.params().iter() {
            push(name, TensorKind::Param, var.as_tensor(), &mut tensors)?;
        }
        let mut steps = BTreeMap::new();
        for (name, slot) in &state.optimizer.state {
            push(name, TensorKind::AdamM, &slot.m, &mut tensors)?;
            push(name, TensorKind::AdamV, &slot.v, &mut tensors)?;
            steps.insert(name.clone(), slot.step);
        }
        let opt = &state.optimizer;
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config_hash: ctx.config_hash.to_string(),
            run_config_hash: ctx.run_config_hash.to_string(),
            model: state.model.config().clone(),
            num_steps: ctx.num_steps,
            schedule: ctx.schedule,
            step: state.step,
            epoch: state.epoch,
            order: state.order.clone(),
            cursor: state.cursor,
            rng: RngState::capture(&state.rng),
            optimizer: OptimizerMeta { lr: opt.lr, beta1: opt.beta1, beta2: opt.beta2, eps: opt.eps, steps },
            tensors,
        };
        Ok(Self { header, data })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec_pretty(&self.header)?;
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + self.data.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.data);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("checksum mismatch; the file is corrupted"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[20..header_end])?;
        let data = body[header_end..].to_vec();
        for e in &header.tensors {
            if e.offset + e.nbytes > data.len() as u64 {
                return Err(Error::Checkpoint(format!("tensor '{}' extends past the data section", e.name)));
            }
        }
        Ok(Self { header, data })
    }

    pub fn tensor(&self, entry: &TensorEntry, device: &Device) -> Result<Tensor> {
        let raw = &self.data[entry.offset as usize..(entry.offset + entry.nbytes) as usize];
        let t = match entry.dtype.as_str() {
            "f32" => {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, entry.shape.as_slice(), device)?
            }
            "f64" => {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, entry.shape.as_slice(), device)?
            }
            other => return Err(Error::Checkpoint(format!("unsupported dtype '{other}'"))),
        };
        Ok(t)
    }

    fn dtype(&self) -> Result<DType> {
        match self.header.tensors.first().map(|e| e.dtype.as_str()) {
            Some("f64") => Ok(DType::F64),
            Some("f32") | None => Ok(DType::F32),
            Some(other) => Err(Error::Checkpoint(format!("unsupported dtype '{other}'"))),
        }
    }

    /// Rebuilds the full training state. Refuses a checkpoint whose
    /// `config_hash` differs from `expected_hash` unless `allow_mismatch`.
    pub fn restore(&self, expected_hash: Option<&str>, allow_mismatch: bool) -> Result<TrainState> {
        if let Some(h) = expected_hash {
            if h != self.header.config_hash {
                if !allow_mismatch {
                    return Err(Error::Checkpoint(format!(
                        "config hash {} does not match the checkpoint's {}",
                        h, self.header.config_hash
                    )));
                }
                log::warn!("loading checkpoint with a different config hash");
            }
        }
        let model = Denoiser::new(self.header.model.clone(), 0, self.dtype()?)?;
        let device = model.device().clone();
        let mut optimizer = Adam::new(self.header.optimizer.lr);
        optimizer.beta1 = self.header.optimizer.beta1;
        optimizer.beta2 = self.header.optimizer.beta2;
        optimizer.eps = self.header.optimizer.eps;
        let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        let mut seen = 0;
        for e in &self.header.tensors {
            let t = self.tensor(e, &device)?;
            match e.kind {
                TensorKind::Param => {
                    model.params().set(&e.name, &t).map_err(|err| Error::Checkpoint(err.to_string()))?;
                    seen += 1;
                }
                TensorKind::AdamM => moments.entry(e.name.clone()).or_default().0 = Some(t),
                TensorKind::AdamV => moments.entry(e.name.clone()).or_default().1 = Some(t),
            }
        }
        if seen != model.params().len() {
            return Err(Error::Checkpoint(format!("checkpoint has {seen} of {} parameters", model.params().len())));
        }
        for (name, (m, v)) in moments {
            let (Some(m), Some(v)) = (m, v) else {
                return Err(Error::Checkpoint(format!("incomplete Adam moments for '{name}'")));
            };
            let step = *self.header.optimizer.steps.get(&name).ok_or_else(|| Error::Checkpoint(format!("no Adam step for '{name}'")))?;
            optimizer.state.insert(name, AdamSlot { step, m, v });
        }
        Ok(TrainState {
            model,
            optimizer,
            rng: self.header.rng.restore()?,
            step: self.header.step,
            epoch: self.header.epoch,
            order: self.header.order.clone(),
            cursor: self.header.cursor,
        })
    }
}

pub fn save_checkpoint(path: &Path, state: &TrainState, ctx: &CheckpointContext<'_>) -> Result<String> {
    let bytes = Checkpoint::from_state(state, ctx)?.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(crate::config::sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// SHA-256 of a checkpoint file.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(crate::config::sha256_hex(&std::fs::read(path)?))
}
