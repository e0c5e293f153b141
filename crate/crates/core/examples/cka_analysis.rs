//! Captures PET- and MRI-pathway activations of a model and prints the
//! per-stage CKA matrices.

use candle_core::DType;
use dualdiff::analysis::{capture_activations, cka_matrix, split_by_branch, CaptureConfig, Stage};
use dualdiff::data::SliceSample;
use dualdiff::diffusion::{NoiseSchedule, ScheduleKind};
use dualdiff::network::{Denoiser, ModelConfig};

fn main() -> dualdiff::Result<()> {
    let model = Denoiser::new(ModelConfig::tiny(), 0, DType::F32)?;
    let schedule = NoiseSchedule::new(100, ScheduleKind::Cosine)?;
    let samples: Vec<SliceSample> = (0..64).map(|i| SliceSample::synthetic(8, i)).collect();
    let layers = model.config().layer_ids();
    println!("layers: {layers:?}");
    let acts = capture_activations(&model, &samples, &layers, &schedule, &CaptureConfig { timestep: 1, seed: 0 })?;
    for (stage, name) in [(Stage::Encoder, "encoder"), (Stage::Decoder, "decoder")] {
        let (pet, mri) = split_by_branch(&acts, stage);
        let m = cka_matrix(&pet, &mri)?;
        println!("\n{name} (rows PET, columns MRI)\n{}", m.to_csv());
    }
    Ok(())
}
