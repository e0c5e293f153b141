//! Layer activation capture and linear CKA between the PET- and
//! MRI-conditioned pathways.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SliceSample;
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::network::{Branch, Denoiser};
use crate::tensor_util::{images_to_tensor, randn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    /// `(n_samples, n_features)`, features flattened channel-major.
    pub data: Array2<f64>,
    pub layer_id: String,
    pub branch: Branch,
    pub stage: Stage,
}

impl ActivationMatrix {
    pub fn new(data: Array2<f64>, layer_id: &str, branch: Branch, stage: Stage) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::invalid(format!("layer {layer_id}: CKA needs at least two samples")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("activations of {layer_id}")));
        }
        Ok(Self { data, layer_id: layer_id.to_string(), branch, stage })
    }
}

/// How inputs are noised before capture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureConfig {
    /// Original-schedule timestep at which `y_t` is formed from the target.
    pub timestep: usize,
    pub seed: u64,
}

/// Runs the model once on `batch` and returns, for each requested layer id
/// (`enc.l1`, `dec.out`, ...), one matrix per branch: PET first, then MRI.
pub fn capture_activations(
    model: &Denoiser,
    batch: &[SliceSample],
    layer_spec: &[String],
    schedule: &NoiseSchedule,
    cfg: &CaptureConfig,
) -> Result<Vec<ActivationMatrix>> {
    let known = model.config().layer_ids();
    for id in layer_spec {
        if !known.contains(id) {
            return Err(Error::invalid(format!("unknown layer id '{id}'; expected one of {known:?}")));
        }
    }
    if batch.iter().any(|s| !s.mri_active) {
        return Err(Error::invalid("activation capture needs every sample to have MRI; the MRI branch has no activations otherwise"));
    }
    if batch.len() < 2 {
        return Err(Error::invalid("activation capture needs at least two samples"));
    }
    let (dtype, device) = (model.dtype(), model.device().clone());
    let (h, w) = batch[0].shape();
    let x = images_to_tensor(&batch.iter().map(|s| &s.x_ld).collect::<Vec<_>>(), dtype, &device)?;
    let z = images_to_tensor(&batch.iter().map(|s| &s.z_mri).collect::<Vec<_>>(), dtype, &device)?;
    let y0 = images_to_tensor(&batch.iter().map(|s| &s.y0_sd).collect::<Vec<_>>(), dtype, &device)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = randn(&mut rng, &[batch.len(), 1, h, w], dtype, &device)?;
    let ts = vec![cfg.timestep; batch.len()];
    let yt = q_sample(&y0, &ts, &eps, schedule)?;
    let mut ctx = ForwardCtx::capturing();
    model.forward(&yt, &x, Some(&z), &ts, true, &mut ctx)?;
    let taps = ctx.take_taps();

    let mut out = Vec::new();
    for id in layer_spec {
        let stage = if id.starts_with("enc") { Stage::Encoder } else { Stage::Decoder };
        for branch in [Branch::Pet, Branch::Mri] {
            let key = format!("{}.{id}", branch.as_str());
            let t = taps
                .get(&key)
                .ok_or_else(|| Error::invalid(format!("layer '{key}' produced no activations for this architecture")))?;
            out.push(ActivationMatrix::new(flatten(t)?, id, branch, stage)?);
        }
    }
    Ok(out)
}

fn flatten(t: &Tensor) -> Result<Array2<f64>> {
    let n = t.dim(0)?;
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let p = flat.len() / n;
    Ok(Array2::from_shape_vec((n, p), flat).expect("row-major batch"))
}

fn centred_gram(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let xc = x - &mean;
    xc.dot(&xc.t())
}

/// Linear CKA with column centring, computed from `n x n` Gram matrices:
/// `<K, L>_F / (||K||_F ||L||_F)`, which equals the feature-space form.
pub fn linear_cka(a: &ActivationMatrix, b: &ActivationMatrix) -> Result<f64> {
    linear_cka_arrays(&a.data, &b.data)
}

pub fn linear_cka_arrays(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape(format!("CKA inputs have {} and {} samples", a.nrows(), b.nrows())));
    }
    if a.nrows() < 2 {
        return Err(Error::invalid("CKA needs at least two samples"));
    }
    let k = centred_gram(a);
    let l = centred_gram(b);
    let kl: f64 = (&k * &l).sum();
    let kk = (&k * &k).sum().sqrt();
    let ll = (&l * &l).sum().sqrt();
    if kk == 0.0 || ll == 0.0 {
        return Err(Error::Degenerate("CKA input has zero variance".into()));
    }
    Ok((kl / (kk * ll)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn cka_matrix(acts_pet: &[ActivationMatrix], acts_mri: &[ActivationMatrix]) -> Result<CkaMatrix> {
    if acts_pet.is_empty() || acts_mri.is_empty() {
        return Err(Error::invalid("CKA matrix needs nonempty layer lists"));
    }
    let values = acts_pet
        .iter()
        .map(|a| acts_mri.iter().map(|b| linear_cka(a, b)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaMatrix {
        rows: acts_pet.iter().map(|a| a.layer_id.clone()).collect(),
        cols: acts_mri.iter().map(|b| b.layer_id.clone()).collect(),
        values,
    })
}

impl CkaMatrix {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.len().min(self.cols.len())).map(|i| self.values[i][i]).collect()
    }

    /// Header row of MRI layer ids; each line starts with the PET layer id.
    pub fn to_csv(&self) -> String {
        let mut out = format!("pet\\mri,{}\n", self.cols.join(","));
        for (r, row) in self.rows.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{r},{}", cells.join(",")).unwrap();
        }
        out
    }

    /// Blue-to-yellow heatmap with `cell` pixels per entry, rows top to bottom.
    pub fn write_heatmap(&self, path: &Path, cell: u32) -> Result<()> {
        let (nr, nc) = (self.rows.len() as u32, self.cols.len() as u32);
        let img = image::RgbImage::from_fn(nc * cell, nr * cell, |x, y| {
            let v = self.values[(y / cell) as usize][(x / cell) as usize].clamp(0.0, 1.0);
            image::Rgb([(255.0 * v) as u8, (64.0 + 160.0 * v) as u8, (200.0 * (1.0 - v)) as u8])
        });
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Splits captured matrices into per-branch lists for one stage, keeping
/// capture order.
pub fn split_by_branch(acts: &[ActivationMatrix], stage: Stage) -> (Vec<ActivationMatrix>, Vec<ActivationMatrix>) {
    let pick = |b: Branch| acts.iter().filter(|a| a.stage == stage && a.branch == b).cloned().collect();
    (pick(Branch::Pet), pick(Branch::Mri))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind};
    use crate::network::ModelConfig;
    use rand::Rng;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, p), || rng.sample(rand_distr::StandardNormal))
    }

    #[test]
    fn self_similarity_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = gaussian(&mut rng, 20, 7);
        assert!((linear_cka_arrays(&a, &a).unwrap() - 1.0).abs() < 1e-10);
        assert!((linear_cka_arrays(&a, &(&a * -3.5)).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_input_is_degenerate() {
        let a = Array2::from_elem((5, 3), 2.0);
        let b = Array2::from_shape_fn((5, 3), |(i, j)| (i + j) as f64);
        assert!(matches!(linear_cka_arrays(&a, &b), Err(Error::Degenerate(_))));
        assert!(linear_cka_arrays(&b, &Array2::zeros((4, 3))).is_err());
    }

    #[test]
    fn matrix_shape_and_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let acts: Vec<ActivationMatrix> = (0..3)
            .map(|i| ActivationMatrix::new(gaussian(&mut rng, 10, 4 + i), &format!("l{i}"), Branch::Pet, Stage::Encoder).unwrap())
            .collect();
        let m = cka_matrix(&acts, &acts[..2]).unwrap();
        assert_eq!((m.values.len(), m.values[0].len()), (3, 2));
        let sq = cka_matrix(&acts, &acts).unwrap();
        assert!(sq.diagonal().iter().all(|d| (d - 1.0).abs() < 1e-10));
        assert_eq!(sq.to_csv().lines().count(), 4);
    }

    #[test]
    fn capture_shapes_and_isolation() {
        let model = Denoiser::new(ModelConfig::tiny(), 0, DType::F64).unwrap();
        let sched = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let batch: Vec<SliceSample> = (0..3).map(|i| SliceSample::synthetic(8, i)).collect();
        let cfg = CaptureConfig { timestep: 5, seed: 0 };
        let spec = vec!["enc.l1".to_string(), "dec.out".to_string()];
        let acts = capture_activations(&model, &batch, &spec, &sched, &cfg).unwrap();
        assert_eq!(acts.len(), 4);
        let c = model.config().level_channels(1);
        assert_eq!(acts[0].data.dim(), (3, c * 8 * 8));
        assert_eq!(acts[3].data.dim(), (3, 64));
        assert_eq!(acts, capture_activations(&model, &batch, &spec, &sched, &cfg).unwrap());
        assert!(capture_activations(&model, &batch, &["dec.l9".to_string()], &sched, &cfg).is_err());
        let mut off = batch.clone();
        off[1].mri_active = false;
        assert!(capture_activations(&model, &off, &spec, &sched, &cfg).is_err());
    }
}
