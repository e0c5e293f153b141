//! Reverse diffusion sampling with per-step branch ensembling.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::io::write_png16;
use crate::diffusion::{reverse_step, NoiseSchedule, ReverseStepInput};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::network::{Denoiser, PredictionPair};
use crate::tensor_util::{images_to_tensor, randn, tensor_to_images};

/// Number of respaced steps in the fast inference profile.
pub const FAST_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Reverse steps; `None` runs the full schedule.
    pub steps: Option<usize>,
    /// Taken from the run's top-level seed rather than the `[sampler]` table.
    #[serde(skip)]
    pub seed: u64,
    pub mri_active: bool,
    pub clip_x0: bool,
    /// Slices per reverse-process batch in the `sample` workflow.
    pub batch_size: usize,
    /// Samples only the first `limit` manifest entries.
    pub limit: Option<usize>,
    /// Orientations to sample; empty means every orientation in the manifest.
    pub orientations: Vec<crate::data::Orientation>,
    /// Fuses subjects whose three orientations were all sampled.
    pub fuse: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: None, seed: 0, mri_active: true, clip_x0: true, batch_size: 8, limit: None, orientations: Vec::new(), fuse: false }
    }
}

impl SamplerConfig {
    pub fn resolved_steps(&self, schedule: &NoiseSchedule) -> Result<usize> {
        let total = schedule.num_steps();
        let steps = self.steps.unwrap_or(total);
        if steps < 1 || steps > total {
            return Err(Error::Config(format!("sampler.steps = {steps} outside [1, {total}]")));
        }
        Ok(steps)
    }
}

/// Mean of the two branch estimates.
pub fn ensemble(pair: &PredictionPair) -> Result<Tensor> {
    if !pair.mri_active {
        return Err(Error::invalid("ensemble needs both branches; use the PET estimate when MRI is inactive"));
    }
    let mri = pair.mri.as_ref().ok_or_else(|| Error::invalid("prediction has no MRI branch output"))?;
    Ok(((&pair.pet.y0_hat + &mri.y0_hat)? * 0.5)?)
}

/// Subsamples `schedule` to `steps` timesteps.
pub fn respace_schedule(schedule: &NoiseSchedule, steps: usize) -> Result<NoiseSchedule> {
    schedule.respace(steps)
}

/// Combined `(y0_hat, v)` for one reverse step. Two branches are averaged:
/// the means directly and the log-variances in log space, which for the
/// learned interpolation is the logit of the mean interpolation weight.
fn combine(pair: &PredictionPair) -> Result<(Tensor, Tensor)> {
    match &pair.mri {
        Some(mri) if pair.mri_active => {
            let y0 = ensemble(pair)?;
            let s_pet = candle_nn::ops::sigmoid(&pair.pet.v.clamp(-50.0, 50.0)?)?;
            let s_mri = candle_nn::ops::sigmoid(&mri.v.clamp(-50.0, 50.0)?)?;
            let s = ((s_pet + s_mri)? * 0.5)?;
            let v = (s.log()? - s.affine(-1.0, 1.0)?.log()?)?.clamp(-50.0, 50.0)?;
            Ok((y0, v))
        }
        _ => Ok((pair.pet.y0_hat.clone(), pair.pet.v.clone())),
    }
}

/// Samples one estimate per input slice. `z_mri` must be given iff
/// `cfg.mri_active`; it is never read otherwise.
pub fn sample_batch(
    model: &Denoiser,
    x_ld: &[&Array2<f32>],
    z_mri: Option<&[&Array2<f32>]>,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<Array2<f32>>> {
    let steps = cfg.resolved_steps(schedule)?;
    let sched = schedule.respace(steps)?;
    let (dtype, device) = (model.dtype(), model.device().clone());
    let x = images_to_tensor(x_ld, dtype, &device)?;
    let z = match (cfg.mri_active, z_mri) {
        (true, Some(z)) => {
            if z.len() != x_ld.len() {
                return Err(Error::shape(format!("{} MRI slices for {} PET slices", z.len(), x_ld.len())));
            }
            Some(images_to_tensor(z, dtype, &device)?)
        }
        (true, None) => return Err(Error::invalid("sampler.mri_active is set but no MRI was given")),
        (false, _) => None,
    };
    let (b, _, h, w) = x.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y = randn(&mut rng, &[b, 1, h, w], dtype, &device)?;
    let mut ctx = ForwardCtx::eval();
    for t in (1..=steps).rev() {
        let model_t = sched.model_timestep(t)?;
        let pair = model.forward(&y, &x, z.as_ref(), &[model_t], cfg.mri_active, &mut ctx)?;
        let (mut y0_hat, v) = combine(&pair)?;
        if cfg.clip_x0 {
            y0_hat = y0_hat.clamp(0.0, 1.0)?;
        }
        let noise = if t > 1 { randn(&mut rng, &[b, 1, h, w], dtype, &device)? } else { y.zeros_like()? };
        y = reverse_step(&ReverseStepInput { y_t: y, y0_hat, v, t, noise }, &sched).map_err(|e| match e {
            Error::NonFinite(what) => Error::Numerical { context: format!("sampling produced non-finite {what}"), index: t },
            other => other,
        })?;
    }
    if cfg.clip_x0 {
        y = y.clamp(0.0, 1.0)?;
    }
    tensor_to_images(&y.to_dtype(DType::F32)?)
}

pub fn sample(
    model: &Denoiser,
    x_ld: &Array2<f32>,
    z_mri: Option<&Array2<f32>>,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Array2<f32>> {
    let z = z_mri.map(|z| [z]);
    let mut out = sample_batch(model, &[x_ld], z.as_ref().map(|z| &z[..]), cfg, schedule)?;
    Ok(out.remove(0))
}

/// Sidecar record written next to each predicted slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub subject_id: String,
    pub orientation: crate::data::Orientation,
    pub slice_index: usize,
    pub seed: u64,
    pub steps: usize,
    pub mri_active: bool,
    pub checkpoint_sha256: String,
}

/// Writes `<stem>.png` (16-bit) and `<stem>.json`.
pub fn write_prediction(dir: &Path, stem: &str, image: &Array2<f32>, meta: &PredictionMeta) -> Result<()> {
    write_png16(&dir.join(format!("{stem}.png")), image)?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}
