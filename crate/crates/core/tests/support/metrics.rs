use dualdiff::metrics::{nmse, paired_ttest, psnr, ssim};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((h, w), || rng.random::<f64>())
}

pub fn pattern(h: usize, w: usize) -> (Array2<f64>, Array2<f64>) {
    let a = Array2::from_shape_fn((h, w), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 10.0);
    let b = Array2::from_shape_fn((h, w), |(i, j)| ((i * 5 + j * 2) % 13) as f64 / 12.0);
    (a, b)
}

/// Sliding 2D Gaussian window evaluated directly at every valid position.
fn ssim_direct(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (h, w) = a.dim();
    let mut k = 11.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let c = (k as f64 - 1.0) / 2.0;
    let mut win = Array2::from_shape_fn((k, k), |(i, j)| (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / 4.5).exp());
    let s = win.sum();
    win /= s;
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (p, q, g) = (a[(y + i, x + j)], b[(y + i, x + j)], win[(i, j)]);
                    ma += g * p;
                    mb += g * q;
                    aa += g * p * p;
                    bb += g * q * q;
                    ab += g * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / ((h - k + 1) * (w - k + 1)) as f64
}

/// Two-tailed Student-t p-value by Simpson integration of the density.
fn t_pvalue(t: f64, df: usize) -> f64 {
    // Gamma((v + 1) / 2) / Gamma(v / 2) by the two-step recurrence.
    let mut g = if df % 2 == 1 { 1.0 / std::f64::consts::PI.sqrt() } else { std::f64::consts::PI.sqrt() / 2.0 };
    let mut v = if df % 2 == 1 { 1 } else { 2 };
    while v < df {
        g *= (v as f64 + 1.0) / v as f64;
        v += 2;
    }
    let nu = df as f64;
    let f = |x: f64| g / (nu * std::f64::consts::PI).sqrt() * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let n = 200_000;
    let hstep = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += f(i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * hstep / 3.0
}

fn t_statistic(xs: &[f64], ys: &[f64]) -> f64 {
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    m / (sd / n.sqrt())
}

pub fn frozen_reference_values() {
    // Reference values from an independent statistics package.
    let xs = [0.912, 0.884, 0.951, 0.793, 0.852, 0.901, 0.934, 0.871, 0.889, 0.921];
    let ys = [0.897, 0.861, 0.903, 0.801, 0.814, 0.884, 0.902, 0.866, 0.871, 0.915];
    let r = paired_ttest(&xs, &ys).unwrap();
    assert!((r.t - 3.680596760472126).abs() < 1e-8);
    assert!((r.p - 0.005070774777977691).abs() < 1e-8);
    assert_eq!(r.df, 9);
    assert!((t_pvalue(r.t, 9) - r.p).abs() < 1e-8);

    for ((h, w), cross, scaled) in [
        ((16, 16), -0.013427745443663987, 0.9757258543767026),
        ((24, 20), -0.0059086392223971305, 0.9757257770476211),
        ((8, 8), -0.10606988592054145, 0.9757167594701173),
    ] {
        let (a, b) = pattern(h, w);
        assert!((ssim(&a, &b).unwrap() - cross).abs() < 1e-12, "{h}x{w}");
        assert!((ssim(&a, &a.mapv(|v| 0.8 * v + 0.1)).unwrap() - scaled).abs() < 1e-12, "{h}x{w}");
    }
}

/// SSIM, PSNR, NMSE and the paired t-test against direct computations on
/// 50 random pairs; returns the elapsed seconds.
pub fn fifty_random_pairs_match_direct_computation() -> f64 {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for k in 0..50 {
        let (h, w) = (12 + k % 9, 14 + k % 5);
        let a = random_image(&mut rng, h, w);
        let b = a.mapv(|v| (v + 0.3 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
        assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-6);

        let e = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let m = e / (h * w) as f64;
        assert!((psnr(&b, &a).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
        assert!((nmse(&b, &a).unwrap() - e / a.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-12);

        let xs: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x - 0.05 + 0.1 * rng.random::<f64>()).collect();
        let r = paired_ttest(&xs, &ys).unwrap();
        assert!((r.t - t_statistic(&xs, &ys)).abs() < 1e-10);
        assert!((r.p - t_pvalue(r.t, 9)).abs() < 1e-8, "p {} vs {}", r.p, t_pvalue(r.t, 9));
    }
    started.elapsed().as_secs_f64()
}
