//! Trains a small dual-branch denoiser for a few hundred steps on
//! simulated slices and saves a checkpoint.

use candle_core::DType;
use dualdiff::checkpoint::{save_checkpoint, CheckpointContext};
use dualdiff::config::model_hash;
use dualdiff::data::tomography::DoseConfig;
use dualdiff::data::{extract_slices, simulate_subject, Orientation};
use dualdiff::network::{Denoiser, ModelConfig};
use dualdiff::training::{train, TrainConfig, TrainState};

fn main() -> dualdiff::Result<()> {
    let dose = DoseConfig { n_angles: 24, mlem_iters: 8, ..DoseConfig::default() };
    let mut slices = Vec::new();
    for seed in 0..3 {
        let s = simulate_subject(seed, (16, 16, 16), &dose)?;
        slices.extend(extract_slices(&s.phantom, &s.ld_vol, Orientation::Axial)?);
    }

    let model_cfg = ModelConfig { input_size: 16, dropout: 0.1, ..ModelConfig::tiny() };
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        num_steps: 200,
        mri_availability: 0.8,
        max_steps: Some(150),
        epochs: 1000,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(Denoiser::new(model_cfg.clone(), cfg.seed, DType::F32)?, &cfg);
    let records = train(&mut state, &slices, &cfg, &mut std::io::sink(), &mut |_| Ok(()))?;
    for r in records.iter().step_by(25) {
        println!("step {:>4}  total {:.5}  pet {:.5}  mri {:.5}  bias {:.5}", r.step, r.total, r.pet, r.mri, r.bias);
    }

    let hash = model_hash(&model_cfg, cfg.num_steps, cfg.schedule);
    let ctx = CheckpointContext { config_hash: &hash, run_config_hash: &hash, num_steps: cfg.num_steps, schedule: cfg.schedule };
    let path = std::env::temp_dir().join("dualdiff_tiny.ckpt");
    let digest = save_checkpoint(&path, &state, &ctx)?;
    println!("saved {} (sha256 {digest})", path.display());
    Ok(())
}
