use candle_core::{DType, Device, Tensor};
use dualdiff::diffusion::{q_sample, reverse_step, NoiseSchedule, ReverseStepInput, ScheduleKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn t64(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn vec1(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

/// Closed-form noising vs iterated single steps, mean and variance within
/// three standard errors.
pub fn q_sample_agrees_with_iterated_single_steps() {
    let s = NoiseSchedule::new(40, ScheduleKind::Cosine).unwrap();
    let y0 = [0.0, 0.3, 0.8, 1.0];
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in [1, 7, 40] {
        let eps: Vec<f64> = (0..n * 4).map(|_| rng.sample(StandardNormal)).collect();
        let y0_rep: Vec<f64> = (0..n).flat_map(|_| y0).collect();
        let closed = vec1(&q_sample(&t64(y0_rep, &[n, 1, 1, 4]), &vec![t; n], &t64(eps, &[n, 1, 1, 4]), &s).unwrap());
        for (p, &y) in y0.iter().enumerate() {
            let mut composed = Vec::with_capacity(n);
            for _ in 0..n {
                let mut v = y;
                for k in 0..t {
                    let z: f64 = rng.sample(StandardNormal);
                    v = s.alphas()[k].sqrt() * v + s.betas()[k].sqrt() * z;
                }
                composed.push(v);
            }
            let a: Vec<f64> = (0..n).map(|i| closed[i * 4 + p]).collect();
            let stats = |x: &[f64]| {
                let m = x.iter().sum::<f64>() / n as f64;
                (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64)
            };
            let ((ma, va), (mb, vb)) = (stats(&a), stats(&composed));
            let se_mean = (va / n as f64 + vb / n as f64).sqrt();
            assert!((ma - mb).abs() < 3.0 * se_mean, "t={t} mean {ma} vs {mb}");
            let se_var = ((2.0 / (n - 1) as f64) * (va * va + vb * vb)).sqrt();
            assert!((va - vb).abs() < 3.0 * se_var, "t={t} var {va} vs {vb}");
        }
    }
}

fn step_variance(s: &NoiseSchedule, t: usize, logit: f64) -> f64 {
    let shape = [1, 1, 1, 1];
    let run = |noise: f64| {
        let input = ReverseStepInput {
            y_t: t64(vec![0.3], &shape),
            y0_hat: t64(vec![0.6], &shape),
            v: t64(vec![logit], &shape),
            t,
            noise: t64(vec![noise], &shape),
        };
        vec1(&reverse_step(&input, s).unwrap())[0]
    };
    (run(1.0) - run(0.0)).powi(2)
}

pub fn reverse_variance_spans_posterior_to_beta() {
    let s = NoiseSchedule::new(100, ScheduleKind::Cosine).unwrap();
    for t in [2, 30, 100] {
        let (lo, hi) = (s.posterior_variance()[t - 1], s.betas()[t - 1]);
        assert!((step_variance(&s, t, -80.0) - lo).abs() < 1e-12 * hi.max(1.0) + 1e-9 * lo);
        assert!((step_variance(&s, t, 80.0) - hi).abs() < 1e-9 * hi);
        for logit in [-3.0, -0.5, 0.0, 1.2, 6.0] {
            let v = step_variance(&s, t, logit);
            assert!(v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12), "t={t} v={v} not in [{lo}, {hi}]");
        }
    }
}

pub fn final_step_is_deterministic() {
    let s = NoiseSchedule::new(10, ScheduleKind::Cosine).unwrap();
    let shape = [1, 1, 2, 2];
    let y0_hat = t64(vec![0.1, 0.5, 0.25, 0.9], &shape);
    let mk = |noise: Vec<f64>| ReverseStepInput {
        y_t: t64(vec![3.0, -1.0, 0.0, 2.0], &shape),
        y0_hat: y0_hat.clone(),
        v: t64(vec![4.0; 4], &shape),
        t: 1,
        noise: t64(noise, &shape),
    };
    assert_eq!(vec1(&reverse_step(&mk(vec![0.0; 4]), &s).unwrap()), vec1(&y0_hat));
    assert!(reverse_step(&mk(vec![0.0, 0.0, 1e-3, 0.0]), &s).is_err());
}
