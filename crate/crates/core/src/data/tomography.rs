//! Parallel-beam projector, MLEM reconstruction and count-level dose
//! reduction.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};

/// Pixel-driven discrete Radon transform with linear interpolation onto the
/// detector. Each pixel spreads its value over at most two bins per angle
/// with weights summing to one, so every angle conserves mass. The
/// backprojection is the exact adjoint.
#[derive(Debug, Clone)]
pub struct Projector {
    size: usize,
    n_angles: usize,
    n_bins: usize,
    /// Per pixel, `(sinogram index, weight)` pairs.
    rows: Vec<Vec<(u32, f64)>>,
}

impl Projector {
    pub fn new(size: usize, n_angles: usize) -> Result<Self> {
        if size == 0 || n_angles == 0 {
            return Err(Error::invalid("projector needs a positive image size and angle count"));
        }
        let mut n_bins = (size as f64 * std::f64::consts::SQRT_2).ceil() as usize + 3;
        if n_bins % 2 == 0 {
            n_bins += 1;
        }
        let centre = (size as f64 - 1.0) / 2.0;
        let det_centre = (n_bins as f64 - 1.0) / 2.0;
        let trig: Vec<(f64, f64)> = (0..n_angles)
            .map(|a| {
                let th = std::f64::consts::PI * a as f64 / n_angles as f64;
                (th.cos(), th.sin())
            })
            .collect();
        let mut rows = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let x = j as f64 - centre;
                let y = centre - i as f64;
                let mut row = Vec::with_capacity(2 * n_angles);
                for (a, (c, s)) in trig.iter().enumerate() {
                    let u = x * c + y * s + det_centre;
                    let k0 = u.floor();
                    let frac = u - k0;
                    let base = (a * n_bins) as u32;
                    let k0 = k0 as u32;
                    if frac < 1.0 - 1e-12 {
                        row.push((base + k0, 1.0 - frac));
                    }
                    if frac > 1e-12 {
                        row.push((base + k0 + 1, frac));
                    }
                }
                rows.push(row);
            }
        }
        Ok(Self { size, n_angles, n_bins, rows })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    fn check(&self, img: &Array2<f64>) -> Result<()> {
        if img.dim() != (self.size, self.size) {
            return Err(Error::shape(format!("image {:?} for a {}x{} projector", img.dim(), self.size, self.size)));
        }
        Ok(())
    }

    /// Sinogram of shape `(n_angles, n_bins)`.
    pub fn forward(&self, img: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(img)?;
        let mut sino = vec![0.0; self.n_angles * self.n_bins];
        for (row, v) in self.rows.iter().zip(img.iter()) {
            if *v == 0.0 {
                continue;
            }
            for &(k, w) in row {
                sino[k as usize] += w * v;
            }
        }
        Ok(Array2::from_shape_vec((self.n_angles, self.n_bins), sino).expect("sized above"))
    }

    pub fn back(&self, sino: &Array2<f64>) -> Result<Array2<f64>> {
        if sino.dim() != (self.n_angles, self.n_bins) {
            return Err(Error::shape(format!("sinogram {:?}, expected {:?}", sino.dim(), (self.n_angles, self.n_bins))));
        }
        let flat = sino.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let img: Vec<f64> = self.rows.iter().map(|row| row.iter().map(|&(k, w)| w * flat[k as usize]).sum()).collect();
        Ok(Array2::from_shape_vec((self.size, self.size), img).expect("sized above"))
    }
}

/// Discrete Radon transform over `n_angles` angles uniformly spaced in
/// `[0, pi)`. Rejects negative activity.
pub fn forward_project(slice: &Array2<f64>, n_angles: usize) -> Result<Array2<f64>> {
    let (h, w) = slice.dim();
    if h != w {
        return Err(Error::shape(format!("projection needs a square slice, got {h}x{w}")));
    }
    if slice.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("projection input must be finite and nonnegative"));
    }
    Projector::new(h, n_angles)?.forward(slice)
}

/// Maximum-likelihood expectation maximisation from measured counts,
/// starting from a uniform image. Calls `on_iter` after every update.
pub fn mlem(
    projector: &Projector,
    counts: &Array2<f64>,
    iterations: usize,
    mut on_iter: impl FnMut(usize, &Array2<f64>),
) -> Result<Array2<f64>> {
    let n = projector.size();
    let sens = projector.back(&Array2::ones((projector.n_angles(), projector.n_bins())))?;
    let mut x = Array2::<f64>::ones((n, n));
    for it in 0..iterations {
        let proj = projector.forward(&x)?;
        let ratio = ndarray::Zip::from(counts).and(&proj).map_collect(|c, p| if *p > 0.0 { c / p } else { 0.0 });
        let corr = projector.back(&ratio)?;
        ndarray::Zip::from(&mut x).and(&corr).and(&sens).for_each(|x, c, s| {
            *x = if *s > 0.0 { *x * c / s } else { 0.0 };
        });
        on_iter(it, &x);
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoseConfig {
    /// Dose reduction factor, >= 1.
    pub drf: f64,
    /// Expected sinogram counts per slice at standard dose.
    pub total_counts: f64,
    pub n_angles: usize,
    pub mlem_iters: usize,
}

impl Default for DoseConfig {
    fn default() -> Self {
        Self { drf: 100.0, total_counts: 5e5, n_angles: 64, mlem_iters: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct LowDoseSlice {
    /// Reconstruction min-max normalised to [0, 1].
    pub image: Array2<f64>,
    /// Reconstruction rescaled to the activity units of the input slice.
    pub activity: Array2<f64>,
    /// Set when the input had no activity; `image` is then all zero.
    pub zero_activity: bool,
}

/// Poisson counts with mean proportional to the projected activity and a
/// total expectation of `total_counts / drf`.
pub fn sample_counts(
    projector: &Projector,
    slice: &Array2<f64>,
    drf: f64,
    total_counts: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, f64)> {
    let sino = projector.forward(slice)?;
    let mass: f64 = sino.sum();
    if mass <= 0.0 {
        return Ok((Array2::zeros(sino.dim()), 0.0));
    }
    let scale = total_counts / drf / mass;
    let counts = sino.mapv(|p| {
        let lambda = p * scale;
        if lambda > 0.0 {
            Poisson::new(lambda).expect("positive mean").sample(rng)
        } else {
            0.0
        }
    });
    Ok((counts, scale))
}

/// Simulates a reduced-dose acquisition of `sd_slice` and reconstructs it.
pub fn simulate_low_dose(
    sd_slice: &Array2<f64>,
    dose: &DoseConfig,
    seed: u64,
    projector: Option<&Projector>,
) -> Result<LowDoseSlice> {
    if !(dose.drf >= 1.0) {
        return Err(Error::invalid(format!("dose reduction factor {} must be >= 1", dose.drf)));
    }
    if !(dose.total_counts > 0.0) || dose.mlem_iters == 0 {
        return Err(Error::invalid("total_counts and mlem_iters must be positive"));
    }
    if sd_slice.iter().any(|v| !(v.is_finite() && (0.0..=1.0 + 1e-9).contains(v))) {
        return Err(Error::invalid("standard-dose slice must lie in [0, 1]"));
    }
    let (h, w) = sd_slice.dim();
    if h != w {
        return Err(Error::shape(format!("dose simulation needs a square slice, got {h}x{w}")));
    }
    let owned;
    let projector = match projector {
        Some(p) => p,
        None => {
            owned = Projector::new(h, dose.n_angles)?;
            &owned
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (counts, scale) = sample_counts(projector, sd_slice, dose.drf, dose.total_counts, &mut rng)?;
    if scale == 0.0 {
        log::debug!("zero-activity slice; returning an empty reconstruction");
        let z = Array2::zeros((h, w));
        return Ok(LowDoseSlice { image: z.clone(), activity: z, zero_activity: true });
    }
    let recon = mlem(projector, &counts, dose.mlem_iters, |_, _| {})?;
    let activity = recon.mapv(|v| v / scale);
    Ok(LowDoseSlice { image: minmax(&recon), activity, zero_activity: false })
}

/// Maps min to 0 and max to 1; a constant image maps to all zeros.
pub fn minmax(a: &Array2<f64>) -> Array2<f64> {
    let lo = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Array2::zeros(a.dim());
    }
    a.mapv(|v| (v - lo) / (hi - lo))
}
