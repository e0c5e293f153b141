//! Image quality metrics, a deterministic perceptual-distance proxy, the
//! paired t-test, and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const PSNR_CAP_DB: f64 = 100.0;
pub const DEFAULT_FEATURIZER_SEED: u64 = 1234;

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("metric inputs {:?} and {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::invalid("metric inputs are empty"));
    }
    Ok(())
}

/// Normalised 1D Gaussian taps. The window is shrunk to the largest odd
/// size that fits when an image side is shorter than `SSIM_WINDOW`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

fn window_size(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Separable valid-mode filtering.
fn filter_valid(x: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let rows = Array2::from_shape_fn((h, w + 1 - k), |(i, j)| (0..k).map(|t| g[t] * x[(i, j + t)]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - k, w + 1 - k), |(i, j)| (0..k).map(|t| g[t] * rows[(i + t, j)]).sum::<f64>())
}

/// Mean local SSIM over every valid window position, data range 1.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.dim();
    let g = gaussian_window(window_size(h, w), SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(a, &g);
    let mu_b = filter_valid(b, &g);
    let aa = filter_valid(&(a * a), &g);
    let bb = filter_valid(&(b * b), &g);
    let ab = filter_valid(&(a * b), &g);
    let mut total = 0.0;
    for idx in ndarray::indices(mu_a.dim()) {
        let (ma, mb) = (mu_a[idx], mu_b[idx]);
        let va = aa[idx] - ma * ma;
        let vb = bb[idx] - mb * mb;
        let cov = ab[idx] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Decibels with a unit peak; zero error maps to `PSNR_CAP_DB`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn nmse_from_mse(mse: f64, reference: &Array2<f64>) -> Result<f64> {
    let energy: f64 = reference.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::Degenerate("NMSE reference is all zero".into()));
    }
    Ok(mse * reference.len() as f64 / energy)
}

pub fn nmse(a: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    nmse_from_mse(mse(a, reference)?, reference)
}

/// Fixed random multi-scale convolutional featurizer. Layer 0 is the image
/// itself; each further layer applies `channels` 3x3 filters to the 2x
/// average-pooled previous input, then `tanh`, then per-pixel unit
/// normalisation across channels.
#[derive(Debug, Clone)]
pub struct Featurizer {
    filters: Vec<Array3<f64>>,
}

impl Featurizer {
    pub const CHANNELS: usize = 8;
    pub const SCALES: usize = 3;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = (0..Self::SCALES)
            .map(|_| {
                Array3::from_shape_simple_fn((Self::CHANNELS, 3, 3), || {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v / 3.0
                })
            })
            .collect();
        Self { filters }
    }

    fn features(&self, img: &Array2<f64>) -> Vec<Array3<f64>> {
        let mut out = vec![img.clone().insert_axis(ndarray::Axis(0))];
        let mut cur = img.clone();
        for f in &self.filters {
            let (h, w) = cur.dim();
            if h >= 2 && w >= 2 {
                cur = Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
                    0.25 * (cur[(2 * i, 2 * j)] + cur[(2 * i + 1, 2 * j)] + cur[(2 * i, 2 * j + 1)] + cur[(2 * i + 1, 2 * j + 1)])
                });
            }
            let (h, w) = cur.dim();
            let mut feat = Array3::<f64>::zeros((Self::CHANNELS, h, w));
            for c in 0..Self::CHANNELS {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (y, x) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                    acc += f[(c, di, dj)] * cur[(y as usize, x as usize)];
                                }
                            }
                        }
                        feat[(c, i, j)] = acc.tanh();
                    }
                }
            }
            for i in 0..h {
                for j in 0..w {
                    let norm = feat.slice(s![.., i, j]).iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                    feat.slice_mut(s![.., i, j]).mapv_inplace(|v| v / norm);
                }
            }
            out.push(feat);
        }
        out
    }

    /// Mean over layers of the per-position squared feature difference,
    /// summed over channels.
    pub fn distance(&self, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
        same_shape(a, b)?;
        let fa = self.features(a);
        let fb = self.features(b);
        let mut total = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let positions = (x.dim().1 * x.dim().2) as f64;
            total += x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / positions;
        }
        Ok(total / fa.len() as f64)
    }
}

/// Reported as `lpips_proxy`; it is not the pretrained LPIPS metric.
pub fn perceptual_distance(a: &Array2<f64>, b: &Array2<f64>, featurizer_seed: u64) -> Result<f64> {
    Featurizer::new(featurizer_seed).distance(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-tailed paired t-test on `xs - ys`.
pub fn paired_ttest(xs: &[f64], ys: &[f64]) -> Result<TTest> {
    if xs.len() != ys.len() {
        return Err(Error::shape(format!("paired samples of length {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numerical { context: e.to_string(), index: 0 })?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df: n - 1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub subject: String,
    pub slice: String,
    pub ssim: f64,
    pub psnr: f64,
    pub nmse: f64,
    pub lpips_proxy: f64,
}

pub const METRIC_NAMES: [&str; 4] = ["ssim", "psnr", "nmse", "lpips_proxy"];

impl SliceMetrics {
    /// All four metrics from one shared MSE.
    pub fn compute(subject: &str, slice: &str, pred: &Array2<f64>, reference: &Array2<f64>, featurizer: &Featurizer) -> Result<Self> {
        let m = mse(pred, reference)?;
        Ok(Self {
            subject: subject.to_string(),
            slice: slice.to_string(),
            ssim: ssim(pred, reference)?,
            psnr: psnr_from_mse(m),
            nmse: nmse_from_mse(m, reference)?,
            lpips_proxy: featurizer.distance(pred, reference)?,
        })
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "ssim" => Some(self.ssim),
            "psnr" => Some(self.psnr),
            "nmse" => Some(self.nmse),
            "lpips_proxy" => Some(self.lpips_proxy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single row.
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub method_a: String,
    pub method_b: String,
    pub metric: String,
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
    /// Set when the test was degenerate and no p-value exists.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_slice: Vec<SliceMetrics>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub tests: Vec<TestRecord>,
}

impl EvalReport {
    pub fn new(method: &str, per_slice: Vec<SliceMetrics>) -> Self {
        let aggregates = METRIC_NAMES
            .iter()
            .map(|m| {
                let v: Vec<f64> = per_slice.iter().map(|r| r.get(m).expect("known metric")).collect();
                (m.to_string(), Aggregate::of(&v))
            })
            .collect();
        Self { method: method.to_string(), per_slice, aggregates, tests: Vec::new() }
    }

    /// Paired tests against `other`, matching rows by `(subject, slice)`.
    pub fn compare(&mut self, other: &EvalReport) -> Result<()> {
        let index: BTreeMap<(&str, &str), &SliceMetrics> =
            other.per_slice.iter().map(|r| ((r.subject.as_str(), r.slice.as_str()), r)).collect();
        let mut pairs = Vec::new();
        for r in &self.per_slice {
            let o = index
                .get(&(r.subject.as_str(), r.slice.as_str()))
                .ok_or_else(|| Error::Data(format!("{} has no row for {}/{}", other.method, r.subject, r.slice)))?;
            pairs.push((r, *o));
        }
        for m in METRIC_NAMES {
            let xs: Vec<f64> = pairs.iter().map(|(a, _)| a.get(m).unwrap()).collect();
            let ys: Vec<f64> = pairs.iter().map(|(_, b)| b.get(m).unwrap()).collect();
            let mut rec = TestRecord {
                method_a: self.method.clone(),
                method_b: other.method.clone(),
                metric: m.to_string(),
                t_statistic: None,
                p_value: None,
                note: None,
            };
            match paired_ttest(&xs, &ys) {
                Ok(t) => {
                    rec.t_statistic = Some(t.t);
                    rec.p_value = Some(t.p);
                }
                Err(e @ (Error::Degenerate(_) | Error::InvalidArgument(_))) => rec.note = Some(e.to_string()),
                Err(e) => return Err(e),
            }
            self.tests.push(rec);
        }
        Ok(())
    }

    pub fn per_slice_csv(&self) -> String {
        let mut out = String::from("subject,slice,ssim,psnr,nmse,lpips_proxy\n");
        for r in &self.per_slice {
            writeln!(out, "{},{},{},{},{},{}", r.subject, r.slice, r.ssim, r.psnr, r.nmse, r.lpips_proxy).unwrap();
        }
        out
    }

    /// Markdown table row in `mean±std` form, four decimals.
    pub fn table(&self) -> String {
        let mut out = String::from("| method | SSIM | PSNR | NMSE | LPIPS (proxy) |\n|---|---|---|---|---|\n");
        let cell = |m: &str| {
            let a = self.aggregates[m];
            format!("{:.4}±{:.4}", a.mean, a.std)
        };
        writeln!(out, "| {} | {} | {} | {} | {} |", self.method, cell("ssim"), cell("psnr"), cell("nmse"), cell("lpips_proxy")).unwrap();
        out
    }
}
