use dualdiff::data::phantom::generate_phantom;
use dualdiff::data::tomography::{minmax, mlem, sample_counts, simulate_low_dose, DoseConfig, Projector};
use dualdiff::metrics::psnr;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn phantom_slice(seed: u64, size: usize) -> Array2<f64> {
    let p = generate_phantom(seed, (size, size, size)).unwrap();
    p.sd_pet.index_axis(Axis(0), size / 2).to_owned()
}

/// Mean total counts after thinning equal total/DRF within three standard errors.
pub fn poisson_thinning_mean_matches_dose() {
    let img = phantom_slice(5, 32);
    let proj = Projector::new(32, 32).unwrap();
    let (total, drf) = (5e5, 100.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let reps = 200;
    let sums: Vec<f64> = (0..reps).map(|_| sample_counts(&proj, &img, drf, total, &mut rng).unwrap().0.sum()).collect();
    let mean = sums.iter().sum::<f64>() / reps as f64;
    let expected = total / drf;
    // Standard error of the mean of Poisson(total / drf) totals.
    let se = (expected / reps as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * se, "mean {mean} vs {expected} (se {se})");
    // Each single draw also lies within three Poisson standard deviations most of the time.
    let within = sums.iter().filter(|s| (*s - expected).abs() < 3.0 * expected.sqrt()).count();
    assert!(within as f64 >= 0.97 * reps as f64);
}

/// Mean PSNR over 20 seeds does not increase as the DRF grows.
pub fn reconstruction_fidelity_is_monotone_in_dose() -> Vec<f64> {
    let proj = Projector::new(32, 64).unwrap();
    let mut means = vec![];
    for drf in [1.0, 20.0, 100.0] {
        let mut total = 0.0;
        for seed in 0..20 {
            let sd = phantom_slice(seed % 5, 32);
            let cfg = DoseConfig { drf, ..DoseConfig::default() };
            let rec = simulate_low_dose(&sd, &cfg, 1000 + seed, Some(&proj)).unwrap();
            total += psnr(&rec.image, &minmax(&sd)).unwrap();
        }
        means.push(total / 20.0);
    }
    assert!(means[0] >= means[1] && means[1] >= means[2], "{means:?}");

    let sd = phantom_slice(1, 32);
    let hi = DoseConfig { drf: 1.0, total_counts: 1e8, mlem_iters: 50, ..DoseConfig::default() };
    let lo = DoseConfig { drf: 1.0, total_counts: 1e4, mlem_iters: 50, ..DoseConfig::default() };
    let p_hi = psnr(&simulate_low_dose(&sd, &hi, 3, Some(&proj)).unwrap().image, &minmax(&sd)).unwrap();
    let p_lo = psnr(&simulate_low_dose(&sd, &lo, 3, Some(&proj)).unwrap().image, &minmax(&sd)).unwrap();
    assert!(p_hi >= p_lo, "{p_hi} vs {p_lo}");
    means
}

/// Every MLEM iterate and the result are finite and nonnegative.
pub fn mlem_is_nonnegative(seed: u64, scale: f64) -> bool {
    let proj = Projector::new(16, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Array2::from_shape_simple_fn((16, 16), || rand::Rng::random::<f64>(&mut rng));
    let (counts, _) = sample_counts(&proj, &img, 1.0, scale * 256.0, &mut rng).unwrap();
    let mut ok = true;
    let rec = mlem(&proj, &counts, 8, |_, x| ok &= x.iter().all(|v| *v >= 0.0 && v.is_finite())).unwrap();
    ok && rec.iter().all(|v| *v >= 0.0)
}
