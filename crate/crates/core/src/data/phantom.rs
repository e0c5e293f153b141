//! Brain-like paired PET/MRI phantoms built from ellipsoids.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MIN_DIM: usize = 16;

/// Tissue labels stored in [`PhantomVolume::labels`].
pub mod tissue {
    pub const BACKGROUND: u8 = 0;
    pub const SKULL: u8 = 1;
    pub const WHITE_MATTER: u8 = 2;
    pub const CORTEX: u8 = 3;
    pub const DEEP_GREY: u8 = 4;
    pub const VENTRICLE: u8 = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolume {
    /// Standard-dose activity in [0, 1].
    pub sd_pet: Array3<f64>,
    /// T1-like structural contrast in [0, 1].
    pub mri: Array3<f64>,
    pub labels: Array3<u8>,
    /// Voxels inside hypometabolic lesions.
    pub lesion_mask: Array3<bool>,
    pub seed: u64,
}

impl PhantomVolume {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.sd_pet.dim()
    }

    pub fn has_lesions(&self) -> bool {
        self.lesion_mask.iter().any(|m| *m)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum::<f64>().sqrt()
    }
}

struct Lesion {
    center: [f64; 3],
    radius: f64,
}

fn jitter(rng: &mut ChaCha8Rng, base: f64, spread: f64) -> f64 {
    base + rng.random_range(-spread..=spread)
}

/// Generates a deterministic phantom: skull shell, folded cortical ribbon
/// with high uptake, deep grey nuclei, low-uptake ventricles, white matter,
/// and (for roughly half of the seeds) focal cortical hypometabolism.
pub fn generate_phantom(seed: u64, shape: (usize, usize, usize)) -> Result<PhantomVolume> {
    let (d, h, w) = shape;
    if d < MIN_DIM || h < MIN_DIM || w < MIN_DIM {
        return Err(Error::invalid(format!("phantom shape {shape:?} needs every dimension >= {MIN_DIM}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let head = Ellipsoid {
        center: [0.0, 0.0, 0.0],
        radii: [jitter(&mut rng, 0.86, 0.04), jitter(&mut rng, 0.9, 0.04), jitter(&mut rng, 0.76, 0.04)],
    };
    let skull_frac = 0.9;
    let cortex_frac = jitter(&mut rng, 0.8, 0.03);
    let folds = [rng.random_range(5.0..9.0), rng.random_range(3.0..6.0), rng.random_range(0.0..std::f64::consts::TAU)];
    let nuclei_r = [jitter(&mut rng, 0.18, 0.02), jitter(&mut rng, 0.16, 0.02), jitter(&mut rng, 0.12, 0.02)];
    let nuclei: Vec<Ellipsoid> = [-1.0, 1.0]
        .iter()
        .map(|s| Ellipsoid { center: [0.0, 0.05, s * 0.26], radii: nuclei_r })
        .collect();
    let atrophy = rng.random_range(0.8..1.4);
    let ventricles: Vec<Ellipsoid> = [-1.0, 1.0]
        .iter()
        .map(|s| Ellipsoid { center: [0.12, -0.05, s * 0.1], radii: [0.12 * atrophy, 0.28 * atrophy, 0.06 * atrophy] })
        .collect();

    let uptake_cortex = jitter(&mut rng, 0.9, 0.05);
    let uptake_deep = jitter(&mut rng, 0.8, 0.05);
    let uptake_wm = jitter(&mut rng, 0.33, 0.04);
    let uptake_csf = 0.05;
    let uptake_skull = 0.08;
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            ([rng.random_range(0.5..2.5), rng.random_range(0.5..2.5), rng.random_range(0.5..2.5)], rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();

    let mut lesions = Vec::new();
    if rng.random_bool(0.5) {
        let n = rng.random_range(1..=2);
        for _ in 0..n {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let zc = rng.random_range(-0.3..0.3);
            let rr = 0.5 * (cortex_frac + 1.0) * skull_frac;
            lesions.push(Lesion {
                center: [zc, rr * head.radii[1] * theta.sin(), rr * head.radii[2] * theta.cos()],
                radius: rng.random_range(0.15..0.22),
            });
        }
    }
    let lesion_factor = rng.random_range(0.4..0.55);

    let coord = |i: usize, n: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    let mut sd_pet = Array3::<f64>::zeros(shape);
    let mut mri = Array3::<f64>::zeros(shape);
    let mut labels = Array3::<u8>::zeros(shape);
    let mut lesion_mask = Array3::from_elem(shape, false);

    for ((i, j, k), label) in labels.indexed_iter_mut() {
        let p = [coord(i, d), coord(j, h), coord(k, w)];
        let r = head.radius(p);
        if r > 1.0 {
            continue;
        }
        let angle = p[1].atan2(p[2]);
        let fold = 1.0 + 0.035 * (folds[0] * angle + folds[2]).sin() * (folds[1] * p[0] * std::f64::consts::PI).cos();
        let rb = r / skull_frac;
        *label = if rb > 1.0 {
            tissue::SKULL
        } else if ventricles.iter().any(|e| e.radius(p) <= 1.0) {
            tissue::VENTRICLE
        } else if nuclei.iter().any(|e| e.radius(p) <= 1.0) {
            tissue::DEEP_GREY
        } else if rb * fold > cortex_frac {
            tissue::CORTEX
        } else {
            tissue::WHITE_MATTER
        };
        let field = 1.0 + waves.iter().map(|(f, ph)| 0.04 * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + ph).cos()).sum::<f64>();
        let (mut pet, t1) = match *label {
            tissue::SKULL => (uptake_skull, 0.3),
            tissue::VENTRICLE => (uptake_csf, 0.12),
            tissue::DEEP_GREY => (uptake_deep * field, 0.62),
            tissue::CORTEX => (uptake_cortex * field, 0.5),
            _ => (uptake_wm * field, 0.85),
        };
        if *label == tissue::CORTEX || *label == tissue::DEEP_GREY {
            let inside = lesions.iter().any(|l| {
                let dist = (0..3).map(|a| (p[a] - l.center[a]).powi(2)).sum::<f64>().sqrt();
                dist <= l.radius
            });
            if inside {
                lesion_mask[(i, j, k)] = true;
                pet *= lesion_factor;
            }
        }
        sd_pet[(i, j, k)] = pet.clamp(0.0, 1.0);
        mri[(i, j, k)] = t1;
    }

    Ok(PhantomVolume { sd_pet, mri, labels, lesion_mask, seed })
}
