//! Trains ablation variants on the desk benchmark and prints held-out
//! SSIM/PSNR plus the diagonal CKA of the full model.
//!
//! Usage: `ablation_benchmark [steps] [seeds] [variants...]`, e.g.
//! `cargo run --release --example ablation_benchmark -- 2000 5 1 2 3 6`.

use dualdiff::diffusion::NoiseSchedule;
use dualdiff::experiment::{cka_trend, DeskBenchmark};

fn main() -> dualdiff::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map_or(Ok(300), |s| s.parse()).expect("steps");
    let seeds: u64 = args.get(1).map_or(Ok(1), |s| s.parse()).expect("seeds");
    let variants: Vec<u8> = if args.len() > 2 { args[2..].iter().map(|s| s.parse().expect("variant")).collect() } else { vec![1, 6] };

    let mut bench = DeskBenchmark::default();
    bench.train.max_steps = Some(steps);
    let t0 = std::time::Instant::now();
    let data = bench.simulate()?;
    println!("simulated {} train / {} held-out slices in {:.1}s", data.train.len(), data.heldout.len(), t0.elapsed().as_secs_f64());
    for seed in 0..seeds {
        for &v in &variants {
            let t = std::time::Instant::now();
            let (model, s) = bench.run_variant(&data, v, seed)?;
            println!("seed {seed} V{v}: ssim {:.4} psnr {:.3} ({:.0}s)", s.ssim, s.psnr, t.elapsed().as_secs_f64());
            if v == 6 {
                let schedule = NoiseSchedule::new(bench.train.num_steps, bench.train.schedule)?;
                let n = data.heldout_all.len().min(64);
                let trend = cka_trend(&model, &data.heldout_all[..n], 1, seed, &schedule)?;
                println!("  cka encoder {:.3?} decoder {:.3?}", trend.encoder, trend.decoder);
            }
        }
    }
    Ok(())
}
