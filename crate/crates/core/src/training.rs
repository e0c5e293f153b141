//! Multi-task objective, partial-MRI masking and the optimisation loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SliceSample;
use crate::diffusion::{q_sample, vlb_variance_term, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, ParamStore};
use crate::network::{Denoiser, PredictionPair};
use crate::tensor_util::{images_to_tensor, randn, scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub vlb_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.4, lambda2: 0.2, vlb_weight: 0.001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("vlb_weight", self.vlb_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} = {w} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of diffusion steps `T`.
    pub num_steps: usize,
    pub schedule: ScheduleKind,
    pub mri_availability: f64,
    /// Taken from the run's top-level seed rather than the `[train]` table.
    #[serde(skip)]
    pub seed: u64,
    /// Stops after this many optimiser steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Checkpoint every N optimiser steps (the final state is always saved).
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 1,
            num_steps: 1000,
            schedule: ScheduleKind::Cosine,
            mri_availability: 1.0,
            seed: 0,
            max_steps: None,
            checkpoint_every: None,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.num_steps == 0 {
            return Err(Error::Config("epochs, batch_size and num_steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mri_availability) {
            return Err(Error::Config("mri_availability must lie in [0, 1]".into()));
        }
        self.weights.validate()
    }
}

/// Mean squared error over all elements.
pub fn recon_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("recon_loss {:?} vs {:?}", pred.dims(), target.dims())));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Consistency loss between the two branch estimates.
pub fn bias_loss(pair: &PredictionPair) -> Result<Tensor> {
    match (&pair.mri, pair.mri_active) {
        (Some(mri), true) => recon_loss(&pair.pet.y0_hat, &mri.y0_hat),
        _ => Err(Error::invalid("bias loss needs both branch predictions")),
    }
}

/// `lambda1 * (pet + mri) + lambda2 * bias + vlb_weight * vlb`.
pub fn total_loss(l_pet: f64, l_mri: f64, l_bias: f64, l_vlb: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("pet", l_pet), ("mri", l_mri), ("bias", l_bias), ("vlb", l_vlb)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("loss component {name} = {v} must be finite and nonnegative")));
        }
    }
    Ok(w.lambda1 * (l_pet + l_mri) + w.lambda2 * l_bias + w.vlb_weight * l_vlb)
}

/// Marks each sample MRI-available with probability `availability`; the
/// MRI slice of unavailable samples is replaced by a NaN sentinel so that
/// any accidental read poisons the result.
pub fn mask_mri<R: Rng + ?Sized>(batch: &[SliceSample], availability: f64, rng: &mut R) -> Result<Vec<SliceSample>> {
    if !(0.0..=1.0).contains(&availability) {
        return Err(Error::invalid(format!("availability {availability} outside [0, 1]")));
    }
    Ok(batch
        .iter()
        .map(|s| {
            let active = rng.random::<f64>() < availability;
            let mut out = s.clone();
            out.mri_active = active;
            if !active {
                out.z_mri = Array2::from_elem(s.z_mri.dim(), f32::NAN);
            }
            out
        })
        .collect())
}

/// Adam with per-parameter step counts. Parameters that receive no gradient
/// in a step are left untouched, state included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) state: BTreeMap<String, AdamSlot>,
}

#[derive(Debug, Clone)]
pub(crate) struct AdamSlot {
    pub(crate) step: u64,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients can still reference the forward graph; detaching
            // keeps the moments from pinning every past step in memory.
            let g = &g.detach();
            let slot = match self.state.get_mut(name) {
                Some(s) => s,
                None => {
                    let zeros = var.zeros_like()?;
                    self.state.insert(name.clone(), AdamSlot { step: 0, m: zeros.clone(), v: zeros });
                    self.state.get_mut(name).unwrap()
                }
            };
            slot.step += 1;
            slot.m = ((&slot.m * self.beta1)? + (g * (1.0 - self.beta1))?)?.detach();
            slot.v = ((&slot.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let bc1 = 1.0 - self.beta1.powi(slot.step as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.step as i32);
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            update_var(var, &(var.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}

fn update_var(var: &Var, value: &Tensor) -> Result<()> {
    var.set(&value.detach())?;
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    pub total: f64,
    pub pet: f64,
    pub mri: f64,
    pub bias: f64,
    pub vlb: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,total,pet,mri,bias,vlb,wall_s";

    pub fn csv_line(&self, wall_s: f64) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}",
            self.step, self.epoch, self.total, self.pet, self.mri, self.bias, self.vlb, wall_s
        )
    }
}

/// Model, optimiser and generator: everything a checkpoint must restore.
#[derive(Debug)]
pub struct TrainState {
    pub model: Denoiser,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
    /// Sample order of the current epoch and the next position in it; empty
    /// between epochs.
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl TrainState {
    pub fn new(model: Denoiser, cfg: &TrainConfig) -> Self {
        Self {
            model,
            optimizer: Adam::new(cfg.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15)),
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        }
    }
}

/// Differentiable loss of one batch plus its logged components.
pub struct BatchLoss {
    pub total: Tensor,
    pub record: LossRecord,
}

fn per_item_mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.flatten_from(1)?.mean(1)?)
}

fn check_items(values: &Tensor, indices: &[usize], what: &str) -> Result<()> {
    let v: Vec<f64> = values.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical { context: format!("{what} loss"), index: indices[pos] });
    }
    Ok(())
}

/// Samples timesteps and noise, runs the denoiser and assembles the
/// multi-task loss. Samples without MRI contribute only to the PET terms.
pub fn batch_loss(
    model: &Denoiser,
    batch: &[SliceSample],
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
    train_mode: bool,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (dtype, device) = (model.dtype(), model.device().clone());
    let n = batch.len();
    let (h, w) = batch[0].y0_sd.dim();
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.num_steps())).collect();
    let eps = randn(rng, &[n, 1, h, w], dtype, &device)?;
    let mut ctx = if train_mode { ForwardCtx::train(ChaCha8Rng::seed_from_u64(rng.random())) } else { ForwardCtx::eval() };

    let uses_mri = model.config().architecture.mri_conditioning;
    let (active, inactive): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| uses_mri && batch[i].mri_active);

    let y0_all = images_to_tensor(&batch.iter().map(|s| &s.y0_sd).collect::<Vec<_>>(), dtype, &device)?;
    let yt_all = q_sample(&y0_all, &ts, &eps, schedule)?;

    let mut pet_sum: Option<Tensor> = None;
    let mut vlb_pet_sum: Option<Tensor> = None;
    let mut l_mri: Option<Tensor> = None;
    let mut l_bias: Option<Tensor> = None;
    let mut vlb_mri: Option<Tensor> = None;

    for (group, mri_active) in [(&active, true), (&inactive, false)] {
        if group.is_empty() {
            continue;
        }
        let idx = Tensor::from_vec(group.iter().map(|&i| i as u32).collect::<Vec<_>>(), group.len(), &device)?;
        let y0 = y0_all.index_select(&idx, 0)?;
        let yt = yt_all.index_select(&idx, 0)?;
        let ts_g: Vec<usize> = group.iter().map(|&i| ts[i]).collect();
        let model_ts = ts_g.iter().map(|&t| schedule.model_timestep(t)).collect::<Result<Vec<_>>>()?;
        let x = images_to_tensor(&group.iter().map(|&i| &batch[i].x_ld).collect::<Vec<_>>(), dtype, &device)?;
        let z = if mri_active {
            Some(images_to_tensor(&group.iter().map(|&i| &batch[i].z_mri).collect::<Vec<_>>(), dtype, &device)?)
        } else {
            None
        };
        let pair = model.forward(&yt, &x, z.as_ref(), &model_ts, mri_active, &mut ctx)?;

        let pet_items = per_item_mse(&pair.pet.y0_hat, &y0)?;
        check_items(&pet_items, group, "pet")?;
        let vlb = vlb_variance_term(&y0, &yt, &pair.pet.y0_hat, &pair.pet.v, &ts_g, schedule)?;
        let g = group.len() as f64;
        pet_sum = Some(add_opt(pet_sum, pet_items.sum_all()?)?);
        vlb_pet_sum = Some(add_opt(vlb_pet_sum, (vlb * g)?)?);

        if let Some(mri) = &pair.mri {
            let mri_items = per_item_mse(&mri.y0_hat, &y0)?;
            check_items(&mri_items, group, "mri")?;
            let bias_items = per_item_mse(&pair.pet.y0_hat, &mri.y0_hat)?;
            check_items(&bias_items, group, "bias")?;
            l_mri = Some(mri_items.mean_all()?);
            l_bias = Some(bias_items.mean_all()?);
            vlb_mri = Some(vlb_variance_term(&y0, &yt, &mri.y0_hat, &mri.v, &ts_g, schedule)?);
        }
    }

    let nf = n as f64;
    let l_pet = (pet_sum.expect("batch is nonempty") / nf)?;
    let mut l_vlb = (vlb_pet_sum.expect("batch is nonempty") / nf)?;
    if let Some(v) = &vlb_mri {
        l_vlb = (l_vlb + v)?;
    }
    let mut total = (&l_pet * weights.lambda1)?;
    if let Some(m) = &l_mri {
        total = (total + (m * weights.lambda1)?)?;
    }
    if let Some(b) = &l_bias {
        total = (total + (b * weights.lambda2)?)?;
    }
    total = (total + (&l_vlb * weights.vlb_weight)?)?;

    let pet = scalar(&l_pet)?;
    let mri = l_mri.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
    let bias = l_bias.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
    let vlb = scalar(&l_vlb)?;
    if ![pet, mri, bias, vlb].iter().all(|x| x.is_finite()) {
        return Err(Error::Numerical { context: "batch loss".into(), index: 0 });
    }
    let record = LossRecord {
        step: 0,
        epoch: 0,
        total: total_loss(pet, mri, bias, vlb.max(0.0), weights)?,
        pet,
        mri,
        bias,
        vlb: vlb.max(0.0),
    };
    Ok(BatchLoss { total, record })
}

fn add_opt(acc: Option<Tensor>, x: Tensor) -> Result<Tensor> {
    Ok(match acc {
        Some(a) => (a + x)?,
        None => x,
    })
}

/// One optimiser update on `batch`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[SliceSample],
    schedule: &NoiseSchedule,
    weights: &LossWeights,
) -> Result<LossRecord> {
    let loss = batch_loss(&state.model, batch, schedule, weights, &mut state.rng, true)?;
    let grads = loss.total.backward()?;
    state.optimizer.step(state.model.params(), &grads)?;
    state.step += 1;
    Ok(LossRecord { step: state.step, epoch: state.epoch, ..loss.record })
}

/// Callback invoked with the state at checkpoint cadence and at the end.
pub type CheckpointHook<'a> = dyn FnMut(&TrainState) -> Result<()> + 'a;

/// Epoch loop over `dataset`: shuffles, masks MRI per batch, steps the
/// optimiser and writes one CSV log line per step.
pub fn train(
    state: &mut TrainState,
    dataset: &[SliceSample],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    on_checkpoint: &mut CheckpointHook<'_>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let schedule = NoiseSchedule::new(cfg.num_steps, cfg.schedule)?;
    let started = Instant::now();
    let mut records = Vec::new();
    if state.step == 0 {
        writeln!(log, "{}", LossRecord::CSV_HEADER)?;
    }
    'outer: while (state.epoch as usize) < cfg.epochs {
        if state.order.len() != dataset.len() || state.cursor >= state.order.len() {
            state.order = (0..dataset.len()).collect();
            state.order.shuffle(&mut state.rng);
            state.cursor = 0;
        }
        while state.cursor < state.order.len() {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break 'outer;
            }
            let end = (state.cursor + cfg.batch_size).min(state.order.len());
            let raw: Vec<SliceSample> = state.order[state.cursor..end].iter().map(|&i| dataset[i].clone()).collect();
            state.cursor = end;
            let batch = mask_mri(&raw, cfg.mri_availability, &mut state.rng)?;
            let rec = train_step(state, &batch, &schedule, &cfg.weights)?;
            writeln!(log, "{}", rec.csv_line(started.elapsed().as_secs_f64()))?;
            records.push(rec);
            if cfg.checkpoint_every.is_some_and(|k| k > 0 && state.step % k == 0) {
                on_checkpoint(state)?;
            }
        }
        state.epoch += 1;
        state.order.clear();
        state.cursor = 0;
    }
    on_checkpoint(state)?;
    Ok(records)
}
