//! Synthetic paired PET/MRI data: phantoms, low-dose simulation, slicing,
//! on-disk arrays and dataset manifests.

pub mod io;
pub mod phantom;
pub mod tomography;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use phantom::{generate_phantom, PhantomVolume};
pub use tomography::{forward_project, mlem, minmax, simulate_low_dose, DoseConfig, LowDoseSlice, Projector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    /// Volume axis the slices are taken along.
    pub fn axis(self) -> usize {
        match self {
            Orientation::Axial => 0,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 2,
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        })
    }
}

impl FromStr for Orientation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Orientation::Axial),
            "coronal" => Ok(Orientation::Coronal),
            "sagittal" => Ok(Orientation::Sagittal),
            other => Err(Error::invalid(format!("unknown orientation '{other}'"))),
        }
    }
}

/// One `(X, Y0, Z)` training or inference triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub x_ld: Array2<f32>,
    pub z_mri: Array2<f32>,
    pub y0_sd: Array2<f32>,
    pub orientation: Orientation,
    pub subject_id: String,
    pub slice_index: usize,
    pub mri_active: bool,
}

impl SliceSample {
    pub fn shape(&self) -> (usize, usize) {
        self.y0_sd.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.y0_sd.dim();
        if self.x_ld.dim() != d || self.z_mri.dim() != d {
            return Err(Error::shape(format!(
                "slice {}:{} arrays disagree: x {:?}, z {:?}, y0 {:?}",
                self.subject_id,
                self.slice_index,
                self.x_ld.dim(),
                self.z_mri.dim(),
                d
            )));
        }
        Ok(())
    }

    /// Small random blob image with a correlated MRI and noisy input, for
    /// tests and examples that do not need a full phantom.
    pub fn synthetic(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (size as f64 - 1.0) / 2.0;
        let r0 = size as f64 * rng.random_range(0.25..0.4);
        let blob = Array2::from_shape_fn((size, size), |(i, j)| {
            let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
            if r < r0 {
                1.0 - 0.5 * r / r0
            } else {
                0.0
            }
        });
        let y0 = minmax(&blob);
        let z = minmax(&blob.mapv(|v| if v > 0.0 { 1.2 - v } else { 0.0 }));
        let x = minmax(&y0.mapv(|v| (v + rng.random_range(-0.2..0.2)).max(0.0)));
        Self {
            x_ld: x.mapv(|v| v as f32),
            z_mri: z.mapv(|v| v as f32),
            y0_sd: y0.mapv(|v| v as f32),
            orientation: Orientation::Axial,
            subject_id: format!("syn{seed}"),
            slice_index: 0,
            mri_active: true,
        }
    }
}

/// Per-slice min-max normalisation; `None` for a constant slice.
pub fn normalize_slice(a: &Array2<f64>) -> Option<Array2<f64>> {
    let lo = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (hi > lo).then(|| a.mapv(|v| (v - lo) / (hi - lo)))
}

/// Slices every index along `orientation`. Slices whose standard-dose image
/// is constant are dropped.
pub fn extract_slices(vol: &PhantomVolume, ld_vol: &Array3<f64>, orientation: Orientation) -> Result<Vec<SliceSample>> {
    if ld_vol.dim() != vol.shape() || vol.mri.dim() != vol.shape() {
        return Err(Error::shape(format!("low-dose volume {:?} vs phantom {:?}", ld_vol.dim(), vol.shape())));
    }
    let axis = Axis(orientation.axis());
    let subject_id = subject_name(vol.seed);
    let mut out = Vec::new();
    let mut dropped = 0;
    for idx in 0..vol.sd_pet.len_of(axis) {
        let Some(y0) = normalize_slice(&vol.sd_pet.index_axis(axis, idx).to_owned()) else {
            dropped += 1;
            continue;
        };
        let norm = |a: Array2<f64>| normalize_slice(&a).unwrap_or_else(|| Array2::zeros(a.dim())).mapv(|v| v as f32);
        out.push(SliceSample {
            x_ld: norm(ld_vol.index_axis(axis, idx).to_owned()),
            z_mri: norm(vol.mri.index_axis(axis, idx).to_owned()),
            y0_sd: y0.mapv(|v| v as f32),
            orientation,
            subject_id: subject_id.clone(),
            slice_index: idx,
            mri_active: true,
        });
    }
    if dropped > 0 {
        log::debug!("{subject_id} {orientation}: dropped {dropped} constant slices");
    }
    Ok(out)
}

pub fn subject_name(seed: u64) -> String {
    format!("sub{seed:04}")
}

/// A phantom together with its simulated low-dose volume in activity units.
#[derive(Debug, Clone)]
pub struct Subject {
    pub phantom: PhantomVolume,
    pub ld_vol: Array3<f64>,
    pub zero_activity_slices: usize,
}

/// Generates a phantom and simulates a reduced-dose acquisition of each
/// axial plane. Slice `i` uses noise seed `seed * 1_000_003 + i`.
pub fn simulate_subject(seed: u64, shape: (usize, usize, usize), dose: &DoseConfig) -> Result<Subject> {
    let phantom = generate_phantom(seed, shape)?;
    let (d, h, w) = shape;
    if h != w {
        return Err(Error::shape(format!("axial planes must be square for projection, got {h}x{w}")));
    }
    let projector = Projector::new(h, dose.n_angles)?;
    let mut ld_vol = Array3::zeros(shape);
    let mut zero = 0;
    for i in 0..d {
        let sd = phantom.sd_pet.index_axis(Axis(0), i).to_owned();
        let slice_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let r = simulate_low_dose(&sd, dose, slice_seed, Some(&projector))?;
        if r.zero_activity {
            zero += 1;
        }
        ld_vol.index_axis_mut(Axis(0), i).assign(&r.activity.mapv(|v| v.max(0.0)));
    }
    Ok(Subject { phantom, ld_vol, zero_activity_slices: zero })
}

/// Finds the dose reduction factor whose reconstruction reaches
/// `target_psnr` (dB) against `sd_slice`, by bisection on log DRF over
/// `[1, max_drf]`. Uses the mean PSNR over `repeats` noise seeds.
pub fn match_drf_to_psnr(
    sd_slice: &Array2<f64>,
    target_psnr: f64,
    dose: &DoseConfig,
    max_drf: f64,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    if !(max_drf > 1.0) || repeats == 0 {
        return Err(Error::invalid("max_drf must exceed 1 and repeats must be positive"));
    }
    let projector = Projector::new(sd_slice.nrows(), dose.n_angles)?;
    let reference = minmax(sd_slice);
    let psnr_at = |drf: f64| -> Result<f64> {
        let cfg = DoseConfig { drf, ..*dose };
        let mut total = 0.0;
        for r in 0..repeats {
            let rec = simulate_low_dose(sd_slice, &cfg, seed.wrapping_add(r as u64), Some(&projector))?;
            total += crate::metrics::psnr(&rec.image, &reference)?;
        }
        Ok(total / repeats as f64)
    };
    let (mut lo, mut hi) = (0.0f64, max_drf.ln());
    if psnr_at(1.0)? <= target_psnr {
        return Ok(1.0);
    }
    if psnr_at(max_drf)? >= target_psnr {
        return Ok(max_drf);
    }
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        if psnr_at(mid.exp())? > target_psnr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub orientation: Orientation,
    pub slice_index: usize,
    pub mri_active: bool,
    pub seed: u64,
    pub x_ld: PathBuf,
    pub z_mri: PathBuf,
    pub y0_sd: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub subjects: usize,
    pub first_seed: u64,
    /// Cubic volume edge length.
    pub size: usize,
    pub orientations: Vec<Orientation>,
    pub dose: DoseConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { subjects: 20, first_seed: 0, size: 64, orientations: vec![Orientation::Axial], dose: DoseConfig::default() }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.orientations.is_empty() {
            return Err(Error::Config("data.subjects and data.orientations must be non-empty".into()));
        }
        if self.size < phantom::MIN_DIM {
            return Err(Error::Config(format!("data.size must be >= {}", phantom::MIN_DIM)));
        }
        if !(self.dose.drf >= 1.0) || !(self.dose.total_counts > 0.0) || self.dose.mlem_iters == 0 || self.dose.n_angles == 0 {
            return Err(Error::Config("data.dose needs drf >= 1 and positive counts, iterations and angles".into()));
        }
        Ok(())
    }

    pub fn subject_seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.subjects as u64).map(move |i| self.first_seed + i)
    }
}

/// Simulates every subject in `cfg`, writes the slices as raw arrays under
/// `out_dir`, and writes the manifest. Returns the records written.
pub fn build_dataset(out_dir: &Path, cfg: &DataConfig) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let mut records = Vec::new();
    for seed in cfg.subject_seeds() {
        let subject = simulate_subject(seed, (cfg.size, cfg.size, cfg.size), &cfg.dose)?;
        for &o in &cfg.orientations {
            let rel = PathBuf::from(subject_name(seed)).join(o.to_string());
            std::fs::create_dir_all(out_dir.join(&rel))?;
            for s in extract_slices(&subject.phantom, &subject.ld_vol, o)? {
                let stem = format!("{:03}", s.slice_index);
                let paths = ["x", "z", "y0"].map(|k| rel.join(format!("{stem}_{k}.raw")));
                io::write_raw(&out_dir.join(&paths[0]), &s.x_ld)?;
                io::write_raw(&out_dir.join(&paths[1]), &s.z_mri)?;
                io::write_raw(&out_dir.join(&paths[2]), &s.y0_sd)?;
                let [x_ld, z_mri, y0_sd] = paths;
                records.push(ManifestRecord {
                    subject_id: s.subject_id,
                    orientation: o,
                    slice_index: s.slice_index,
                    mri_active: true,
                    seed,
                    x_ld,
                    z_mri,
                    y0_sd,
                });
            }
        }
        log::info!("simulated {}", subject_name(seed));
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

/// Reads the slices named by `records`. With `load_mri` false no MRI file is
/// opened; the MRI array is filled with NaN and the sample marked inactive.
pub fn load_samples(root: &Path, records: &[ManifestRecord], load_mri: bool) -> Result<Vec<SliceSample>> {
    records
        .iter()
        .map(|r| {
            let x_ld = io::read_raw(&root.join(&r.x_ld))?;
            let y0_sd = io::read_raw(&root.join(&r.y0_sd))?;
            let use_mri = load_mri && r.mri_active;
            let z_mri = if use_mri { io::read_raw(&root.join(&r.z_mri))? } else { Array2::from_elem(y0_sd.dim(), f32::NAN) };
            let s = SliceSample {
                x_ld,
                z_mri,
                y0_sd,
                orientation: r.orientation,
                subject_id: r.subject_id.clone(),
                slice_index: r.slice_index,
                mri_active: use_mri,
            };
            s.validate().map_err(|e| Error::Data(e.to_string()))?;
            Ok(s)
        })
        .collect()
}
