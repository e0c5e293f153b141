//! Scores two prediction sets against references (SSIM, PSNR, NMSE and the
//! perceptual proxy) and compares them with paired t-tests.

use dualdiff::metrics::{EvalReport, Featurizer, SliceMetrics};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> dualdiff::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Featurizer::new(dualdiff::metrics::DEFAULT_FEATURIZER_SEED);
    let (mut good, mut poor) = (vec![], vec![]);
    for k in 0..12 {
        let reference = Array2::from_shape_fn((32, 32), |(i, j)| (((i as f64 + k as f64) * 0.3).sin() * (j as f64 * 0.2).cos()).abs());
        let mut noisy = |sigma: f64| reference.mapv(|v| (v + sigma * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0));
        let (a, b) = (noisy(0.03), noisy(0.08));
        let slice = format!("axial:{k}");
        good.push(SliceMetrics::compute("sub0000", &slice, &a, &reference, &f)?);
        poor.push(SliceMetrics::compute("sub0000", &slice, &b, &reference, &f)?);
    }
    let mut report = EvalReport::new("low-noise", good);
    let baseline = EvalReport::new("high-noise", poor);
    report.compare(&baseline)?;
    print!("{}", report.table());
    println!("{}", baseline.table().lines().last().unwrap_or_default());
    for t in &report.tests {
        println!("{} vs {} on {}: t = {:?}, p = {:?}", t.method_a, t.method_b, t.metric, t.t_statistic, t.p_value);
    }
    Ok(())
}
