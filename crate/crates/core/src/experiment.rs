//! Desk-scale ablation benchmark: simulate phantom subjects in memory, train
//! architecture variants for a fixed step budget and score sampled
//! predictions on held-out subjects.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::analysis::{capture_activations, cka_matrix, split_by_branch, CaptureConfig, Stage};
use crate::data::{extract_slices, simulate_subject, Orientation, SliceSample};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::metrics::{psnr, ssim};
use crate::network::{Architecture, Denoiser, ModelConfig};
use crate::sampling::{sample_batch, SamplerConfig};
use crate::tensor_util::array2_to_f64;
use crate::training::{train, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskBenchmark {
    pub size: usize,
    pub train_subjects: usize,
    pub heldout_subjects: usize,
    pub first_subject_seed: u64,
    pub dose: crate::data::tomography::DoseConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample_steps: usize,
    /// Held-out slices scored per run, spread evenly over the held-out set.
    pub eval_slices: usize,
}

impl Default for DeskBenchmark {
    fn default() -> Self {
        Self {
            size: 32,
            train_subjects: 20,
            heldout_subjects: 4,
            first_subject_seed: 0,
            dose: Default::default(),
            model: ModelConfig {
                base_channels: 8,
                channel_multipliers: vec![1, 2, 4],
                attention_levels: vec![3],
                num_res_blocks_per_level: 1,
                dropout: 0.1,
                input_size: 32,
                fused_width_per_level: None,
                norm_groups: 4,
                architecture: Architecture::full(),
            },
            train: TrainConfig {
                epochs: 1_000_000,
                learning_rate: 5e-4,
                batch_size: 4,
                max_steps: Some(2000),
                ..TrainConfig::default()
            },
            sample_steps: 25,
            eval_slices: 24,
        }
    }
}

/// Simulated training and held-out slices.
#[derive(Debug, Clone)]
pub struct DeskData {
    pub train: Vec<SliceSample>,
    /// Scored subset of `heldout_all`.
    pub heldout: Vec<SliceSample>,
    pub heldout_all: Vec<SliceSample>,
}

/// Mean held-out scores of one trained variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: u8,
    pub seed: u64,
    pub ssim: f64,
    pub psnr: f64,
}

impl DeskBenchmark {
    fn subjects(&self, first: u64, n: usize) -> Result<Vec<SliceSample>> {
        let shape = (self.size, self.size, self.size);
        let mut out = Vec::new();
        for seed in first..first + n as u64 {
            let s = simulate_subject(seed, shape, &self.dose)?;
            out.extend(extract_slices(&s.phantom, &s.ld_vol, Orientation::Axial)?);
        }
        Ok(out)
    }

    /// Held-out subjects follow the training subjects' seeds.
    pub fn simulate(&self) -> Result<DeskData> {
        let train = self.subjects(self.first_subject_seed, self.train_subjects)?;
        let all = self.subjects(self.first_subject_seed + self.train_subjects as u64, self.heldout_subjects)?;
        let n = self.eval_slices.min(all.len()).max(1);
        let heldout = (0..n).map(|k| all[k * all.len() / n].clone()).collect();
        Ok(DeskData { train, heldout, heldout_all: all })
    }

    pub fn train_variant(&self, data: &DeskData, variant: u8, seed: u64) -> Result<Denoiser> {
        let model_cfg = ModelConfig { architecture: Architecture::variant(variant)?, input_size: self.size, ..self.model.clone() };
        let model = Denoiser::new(model_cfg, seed, DType::F32)?;
        let cfg = TrainConfig { seed, ..self.train.clone() };
        let mut state = TrainState::new(model, &cfg);
        train(&mut state, &data.train, &cfg, &mut std::io::sink(), &mut |_| Ok(()))?;
        Ok(state.model)
    }

    pub fn score(&self, model: &Denoiser, data: &DeskData, variant: u8, seed: u64) -> Result<VariantScore> {
        let schedule = NoiseSchedule::new(self.train.num_steps, self.train.schedule)?;
        let uses_mri = model.config().architecture.mri_conditioning;
        let cfg = SamplerConfig { steps: Some(self.sample_steps), seed, mri_active: uses_mri, ..SamplerConfig::default() };
        let (mut s_sum, mut p_sum) = (0.0, 0.0);
        for chunk in data.heldout.chunks(8) {
            let x: Vec<_> = chunk.iter().map(|s| &s.x_ld).collect();
            let z: Vec<_> = chunk.iter().map(|s| &s.z_mri).collect();
            let preds = sample_batch(model, &x, uses_mri.then_some(&z[..]), &cfg, &schedule)?;
            for (p, s) in preds.iter().zip(chunk) {
                let (p, y) = (array2_to_f64(p), array2_to_f64(&s.y0_sd));
                s_sum += ssim(&p, &y)?;
                p_sum += psnr(&p, &y)?;
            }
        }
        let n = data.heldout.len() as f64;
        Ok(VariantScore { variant, seed, ssim: s_sum / n, psnr: p_sum / n })
    }

    pub fn run_variant(&self, data: &DeskData, variant: u8, seed: u64) -> Result<(Denoiser, VariantScore)> {
        let model = self.train_variant(data, variant, seed)?;
        let score = self.score(&model, data, variant, seed)?;
        Ok((model, score))
    }
}

/// Diagonal PET/MRI CKA per stage, shallow to deep for the encoder and
/// deep to shallow (decoder order) for the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaTrend {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

pub fn cka_trend(model: &Denoiser, samples: &[SliceSample], timestep: usize, seed: u64, schedule: &NoiseSchedule) -> Result<CkaTrend> {
    let layers = model.config().layer_ids();
    let acts = capture_activations(model, samples, &layers, schedule, &CaptureConfig { timestep, seed })?;
    let diag = |stage| -> Result<Vec<f64>> {
        let (pet, mri) = split_by_branch(&acts, stage);
        Ok(cka_matrix(&pet, &mri)?.diagonal())
    };
    Ok(CkaTrend { encoder: diag(Stage::Encoder)?, decoder: diag(Stage::Decoder)? })
}
