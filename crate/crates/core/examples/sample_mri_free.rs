//! Samples the same low-dose slices with and without MRI guidance from one
//! model. The MRI-free path never reads the MRI input, so NaN MRI is fine.

use candle_core::DType;
use dualdiff::data::SliceSample;
use dualdiff::diffusion::{NoiseSchedule, ScheduleKind};
use dualdiff::metrics::{psnr, ssim};
use dualdiff::network::{Denoiser, ModelConfig};
use dualdiff::sampling::{sample_batch, SamplerConfig};
use dualdiff::tensor_util::array2_to_f64;
use ndarray::Array2;

fn main() -> dualdiff::Result<()> {
    let model = Denoiser::new(ModelConfig::tiny(), 0, DType::F32)?;
    let schedule = NoiseSchedule::new(100, ScheduleKind::Cosine)?;
    let slices: Vec<SliceSample> = (0..4).map(|i| SliceSample::synthetic(8, i)).collect();
    let x: Vec<&Array2<f32>> = slices.iter().map(|s| &s.x_ld).collect();
    let z: Vec<&Array2<f32>> = slices.iter().map(|s| &s.z_mri).collect();
    let nan_mri: Vec<Array2<f32>> = slices.iter().map(|s| Array2::from_elem(s.z_mri.dim(), f32::NAN)).collect();
    let nan_refs: Vec<&Array2<f32>> = nan_mri.iter().collect();

    let guided = SamplerConfig { steps: Some(20), seed: 7, ..SamplerConfig::default() };
    let free = SamplerConfig { mri_active: false, ..guided.clone() };
    for (name, cfg, mri) in [("with MRI", &guided, &z), ("without MRI", &free, &nan_refs)] {
        let preds = sample_batch(&model, &x, Some(mri), cfg, &schedule)?;
        let (mut s, mut p) = (0.0, 0.0);
        for (pred, sl) in preds.iter().zip(&slices) {
            let (a, b) = (array2_to_f64(pred), array2_to_f64(&sl.y0_sd));
            s += ssim(&a, &b)?;
            p += psnr(&a, &b)?;
        }
        let n = preds.len() as f64;
        println!("{name:<12} untrained model: SSIM {:.4}  PSNR {:.2}", s / n, p / n);
    }
    Ok(())
}
