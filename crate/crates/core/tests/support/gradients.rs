//! Central finite differences against autograd on a float64 tiny model.

use candle_core::{DType, Device, Tensor};
use dualdiff::data::SliceSample;
use dualdiff::diffusion::{NoiseSchedule, ScheduleKind};
use dualdiff::layers::ForwardCtx;
use dualdiff::network::{Denoiser, ModelConfig};
use dualdiff::tensor_util::scalar;
use dualdiff::training::{batch_loss, LossWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn model() -> Denoiser {
    Denoiser::new(ModelConfig::tiny(), 21, DType::F64).unwrap()
}

fn image(seed: f64) -> Tensor {
    let v: Vec<f64> = (0..2 * 64).map(|i| ((i as f64 + seed) * 0.713).sin() * 0.5 + 0.5).collect();
    Tensor::from_vec(v, (2, 1, 8, 8), &Device::Cpu).unwrap()
}

fn element(m: &Denoiser, name: &str, k: usize) -> f64 {
    m.params().get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[k]
}

fn assign(m: &Denoiser, name: &str, k: usize, value: f64) {
    let var = m.params().get(name).unwrap();
    let mut v: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    v[k] = value;
    m.params().set(name, &Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
}

/// Checks a few elements of each named parameter; returns the worst
/// relative error.
fn check(m: &Denoiser, names: &[String], loss: &dyn Fn(&Denoiser) -> Tensor) -> f64 {
    check_at(m, names, loss, &|n| vec![0, n / 3, n / 2, n - 1])
}

fn check_at(m: &Denoiser, names: &[String], loss: &dyn Fn(&Denoiser) -> Tensor, at: &dyn Fn(usize) -> Vec<usize>) -> f64 {
    let grads = loss(m).backward().unwrap();
    let mut worst: f64 = 0.0;
    for name in names {
        let var = m.params().get(name).unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let n = g.len();
        for k in at(n) {
            let before = element(m, name, k);
            assign(m, name, k, before + H);
            let up = scalar(&loss(m)).unwrap();
            assign(m, name, k, before - H);
            let down = scalar(&loss(m)).unwrap();
            assign(m, name, k, before);
            assert_eq!(element(m, name, k), before);
            let fd = (up - down) / (2.0 * H);
            let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name}[{k}]: autograd {} vs finite difference {fd} (rel {rel:.2e})", g[k]);
            worst = worst.max(rel);
        }
    }
    worst
}

fn names_with(m: &Denoiser, pred: impl Fn(&str) -> bool) -> Vec<String> {
    m.params().iter().map(|(n, _)| n.clone()).filter(|n| pred(n)).collect()
}

/// HFF projections (per-level T1/T2 weights and biases) and fusion head.
pub fn fusion_projections_and_head() -> f64 {
    let m = model();
    let proj = |w: &str| {
        let mut c = vec![];
        for l in 1..=2 {
            for p in ["weight", "bias"] {
                c.push(format!("hff.l{l}.{w}.{p}"));
            }
        }
        c
    };
    let names: Vec<String> = [proj("proj_pet"), proj("proj_mri")].concat();
    for n in &names {
        assert!(m.params().get(n).is_some(), "missing parameter {n}");
    }
    let head = names_with(&m, |n| n.starts_with("hff.") && n.contains(".head."));
    assert!(!head.is_empty());
    let (yt, x, z) = (image(0.0), image(3.0), image(7.0));
    let w = image(11.0);
    let loss = |m: &Denoiser| {
        let pair = m.forward(&yt, &x, Some(&z), &[5, 9], true, &mut ForwardCtx::eval()).unwrap();
        let pet = (&pair.pet.y0_hat * &w).unwrap().sum_all().unwrap();
        let mri = pair.mri.unwrap().y0_hat.sqr().unwrap().sum_all().unwrap();
        (pet + mri).unwrap()
    };
    check(&m, &names, &loss).max(check(&m, &head, &loss))
}

fn loss_term_check(weights: LossWeights, pick: impl Fn(&str) -> bool) -> f64 {
    let m = model();
    let schedule = NoiseSchedule::new(50, ScheduleKind::Cosine).unwrap();
    let batch: Vec<SliceSample> = (0..3).map(|i| SliceSample::synthetic(8, i)).collect();
    let loss = |m: &Denoiser| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        batch_loss(m, &batch, &schedule, &weights, &mut rng, false).unwrap().total
    };
    let names = names_with(&m, pick);
    assert!(!names.is_empty());
    check(&m, &names, &loss)
}

pub fn reconstruction_term() -> f64 {
    let w = LossWeights { lambda1: 1.0, lambda2: 0.0, vlb_weight: 0.0 };
    loss_term_check(w, |n| n.ends_with("out_conv.weight") || n.starts_with("hff.l2.head") || n.contains("enc.stem"))
}

pub fn bias_term() -> f64 {
    let w = LossWeights { lambda1: 0.0, lambda2: 1.0, vlb_weight: 0.0 };
    loss_term_check(w, |n| n.ends_with("out_conv.weight") || n.starts_with("hff.l1.proj"))
}

/// The bound trains only the variance channel: the mean estimate is
/// detached inside it, so channel 0 of the output convolution gets exactly
/// zero gradient and channel 1 matches finite differences.
pub fn variance_bound_term() -> f64 {
    let m = model();
    let schedule = NoiseSchedule::new(50, ScheduleKind::Cosine).unwrap();
    let batch: Vec<SliceSample> = (0..3).map(|i| SliceSample::synthetic(8, i)).collect();
    let w = LossWeights { lambda1: 0.0, lambda2: 0.0, vlb_weight: 1.0 };
    let loss = |m: &Denoiser| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        batch_loss(m, &batch, &schedule, &w, &mut rng, false).unwrap().total
    };
    let grads = loss(&m).backward().unwrap();
    let out = names_with(&m, |n| n.contains("out_conv"));
    assert_eq!(out.len(), 4);
    for name in &out {
        let g: Vec<f64> = grads.get(m.params().get(name).unwrap().as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let half = g.len() / 2;
        assert!(g[..half].iter().all(|x| *x == 0.0), "{name}: mean channel received gradient");
        assert!(g[half..].iter().any(|x| *x != 0.0), "{name}: variance channel received no gradient");
    }
    check_at(&m, &out, &loss, &|n| vec![n / 2, n / 2 + n / 5, n - 1])
}
