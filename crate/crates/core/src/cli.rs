//! Command-line workflows: dataset simulation, training, sampling,
//! evaluation and CKA analysis.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 data or checkpoint error, 4 numerical failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;

use crate::analysis::{capture_activations, cka_matrix, split_by_branch, Stage};
use crate::checkpoint::{file_digest, load_checkpoint, save_checkpoint, CheckpointContext};
use crate::config::{sha256_hex, RunConfig};
use crate::data::io::{read_png16, read_raw, write_raw, write_raw3};
use crate::data::{build_dataset, load_samples, read_manifest, ManifestRecord, Orientation, MANIFEST_FILE};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::fusion::{fuse_volumes, stack_orientation};
use crate::metrics::{EvalReport, Featurizer, SliceMetrics};
use crate::network::Denoiser;
use crate::sampling::{sample_batch, write_prediction, PredictionMeta};
use crate::training::{train, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Default parent of timestamped run directories.
pub const RUN_ROOT_ENV: &str = "DUALDIFF_RUN_ROOT";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Checkpoint(_) | Error::ShapeMismatch(_) | Error::Image(_) | Error::Json(_) => EXIT_DATA,
        Error::Numerical { .. } | Error::NonFinite(_) | Error::Degenerate(_) => EXIT_NUMERICAL,
        _ => EXIT_OTHER,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SimulateDose,
    Train,
    Sample,
    Evaluate,
    AnalyzeCka,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SimulateDose => "simulate-dose",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Evaluate => "evaluate",
            Command::AnalyzeCka => "analyze-cka",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value` override of a config field, e.g. `train.learning_rate=2e-4`.
    #[arg(long = "override", visible_alias = "overrides", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; defaults to `<run root>/<timestamp>-<command>-<config hash>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Replaces the config's top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory for generated run directories.
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
    /// Load a checkpoint even if its model config hash differs.
    #[arg(long)]
    pub allow_config_mismatch: bool,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Simulate phantom subjects at reduced dose and write a dataset.
    SimulateDose(CommonArgs),
    /// Train the denoiser on a simulated dataset.
    Train(CommonArgs),
    /// Sample predictions from a checkpoint.
    Sample(CommonArgs),
    /// Score predictions against ground truth.
    Evaluate(CommonArgs),
    /// Compute PET/MRI pathway CKA matrices from a checkpoint.
    AnalyzeCka(CommonArgs),
}

#[derive(Debug, Parser)]
#[command(name = "dualdiff", version, about = "MRI-guided low-dose PET diffusion workflows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

impl CliCommand {
    pub fn split(self) -> (Command, CommonArgs) {
        match self {
            CliCommand::SimulateDose(a) => (Command::SimulateDose, a),
            CliCommand::Train(a) => (Command::Train, a),
            CliCommand::Sample(a) => (Command::Sample, a),
            CliCommand::Evaluate(a) => (Command::Evaluate, a),
            CliCommand::AnalyzeCka(a) => (Command::AnalyzeCka, a),
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (cmd, args) = cli.command.split();
    match run(cmd, &args) {
        Ok(dir) => {
            log::info!("{} finished; outputs in {}", cmd.name(), dir.display());
            EXIT_OK
        }
        Err(e) => {
            log::error!("{} failed: {e}", cmd.name());
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: Command,
    config_hash: String,
    model_hash: String,
    seed: u64,
    data_first_seed: u64,
    featurizer_seed: u64,
    crate_version: &'static str,
    executable_sha256: Option<String>,
    overrides: &'a [String],
}

fn prepare_run_dir(cmd: Command, args: &CommonArgs, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match &args.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
            args.run_root.join(format!("{stamp}-{}-{}", cmd.name(), &cfg.config_hash()[..12]))
        }
    };
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let exe = std::env::current_exe().ok().and_then(|p| std::fs::read(p).ok()).map(|b| sha256_hex(&b));
    let record = RunRecord {
        command: cmd,
        config_hash: cfg.config_hash(),
        model_hash: cfg.model_hash(),
        seed: cfg.seed,
        data_first_seed: cfg.data.first_seed,
        featurizer_seed: cfg.metrics.featurizer_seed,
        crate_version: env!("CARGO_PKG_VERSION"),
        executable_sha256: exe,
        overrides: &args.overrides,
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(dir)
}

/// Resolves the configuration, prepares the run directory and executes
/// `cmd`. Returns the run directory.
pub fn run(cmd: Command, args: &CommonArgs) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(&args.config, &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    let dir = prepare_run_dir(cmd, args, &cfg)?;
    match cmd {
        Command::SimulateDose => simulate(&cfg, &dir),
        Command::Train => train_cmd(&cfg, &dir, args.allow_config_mismatch),
        Command::Sample => sample_cmd(&cfg, &dir, args.allow_config_mismatch),
        Command::Evaluate => evaluate_cmd(&cfg, &dir),
        Command::AnalyzeCka => cka_cmd(&cfg, &dir, args.allow_config_mismatch),
    }?;
    Ok(dir)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{key} must be set for this command")))
}

fn manifest(dataset: &Path) -> Result<Vec<ManifestRecord>> {
    read_manifest(&dataset.join(MANIFEST_FILE))
}

fn simulate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let out = dir.join("dataset");
    std::fs::create_dir_all(&out)?;
    let records = build_dataset(&out, &cfg.data)?;
    log::info!("wrote {} slices to {}", records.len(), out.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, dir: &Path, allow_mismatch: bool) -> Result<()> {
    let dataset = require(&cfg.paths.dataset, "paths.dataset")?;
    let samples = load_samples(dataset, &manifest(dataset)?, true)?;
    let model_hash = cfg.model_hash();
    let run_hash = cfg.config_hash();
    let mut state = match &cfg.paths.checkpoint {
        Some(p) => load_checkpoint(p)?.restore(Some(&model_hash), allow_mismatch)?,
        None => TrainState::new(Denoiser::new(cfg.model_config(), cfg.seed, candle_core::DType::F32)?, &cfg.train),
    };
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let ctx = CheckpointContext {
        config_hash: &model_hash,
        run_config_hash: &run_hash,
        num_steps: cfg.train.num_steps,
        schedule: cfg.train.schedule,
    };
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.csv"))?);
    let mut hook = |st: &TrainState| -> Result<()> {
        save_checkpoint(&ckpt_dir.join(format!("step_{:07}.ckpt", st.step)), st, &ctx)?;
        Ok(())
    };
    let records = train(&mut state, &samples, &cfg.train, &mut log_file, &mut hook)?;
    log_file.flush()?;
    let digest = save_checkpoint(&dir.join("final.ckpt"), &state, &ctx)?;
    log::info!("trained {} steps; final checkpoint sha256 {digest}", records.len());
    Ok(())
}

fn load_model(cfg: &RunConfig, allow_mismatch: bool) -> Result<(Denoiser, NoiseSchedule, String)> {
    let path = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let ck = load_checkpoint(path)?;
    let state = ck.restore(Some(&cfg.model_hash()), allow_mismatch)?;
    let schedule = NoiseSchedule::new(ck.header.num_steps, ck.header.schedule)?;
    Ok((state.model, schedule, file_digest(path)?))
}

fn sample_cmd(cfg: &RunConfig, dir: &Path, allow_mismatch: bool) -> Result<()> {
    let dataset = require(&cfg.paths.dataset, "paths.dataset")?;
    let (model, schedule, ckpt_digest) = load_model(cfg, allow_mismatch)?;
    let sc = &cfg.sampler;
    let mut records: Vec<ManifestRecord> = manifest(dataset)?
        .into_iter()
        .filter(|r| sc.orientations.is_empty() || sc.orientations.contains(&r.orientation))
        .collect();
    if let Some(n) = sc.limit {
        records.truncate(n);
    }
    let steps = sc.resolved_steps(&schedule)?;
    let out = dir.join("predictions");
    std::fs::create_dir_all(&out)?;
    let mut predicted: BTreeMap<(String, Orientation), BTreeMap<usize, Array2<f64>>> = BTreeMap::new();
    for (b, chunk) in records.chunks(sc.batch_size.max(1)).enumerate() {
        let samples = load_samples(dataset, chunk, sc.mri_active)?;
        let x: Vec<&Array2<f32>> = samples.iter().map(|s| &s.x_ld).collect();
        let z: Vec<&Array2<f32>> = samples.iter().map(|s| &s.z_mri).collect();
        let batch_cfg = crate::sampling::SamplerConfig { seed: cfg.seed.wrapping_add(b as u64), ..sc.clone() };
        let images = sample_batch(&model, &x, sc.mri_active.then_some(&z[..]), &batch_cfg, &schedule)?;
        for (s, img) in samples.iter().zip(&images) {
            let stem = prediction_stem(&s.subject_id, s.orientation, s.slice_index);
            let meta = PredictionMeta {
                subject_id: s.subject_id.clone(),
                orientation: s.orientation,
                slice_index: s.slice_index,
                seed: batch_cfg.seed,
                steps,
                mri_active: sc.mri_active,
                checkpoint_sha256: ckpt_digest.clone(),
            };
            write_prediction(&out, &stem, img, &meta)?;
            write_raw(&out.join(format!("{stem}.raw")), img)?;
            if sc.fuse {
                predicted
                    .entry((s.subject_id.clone(), s.orientation))
                    .or_default()
                    .insert(s.slice_index, img.mapv(f64::from));
            }
        }
        log::info!("sampled {} / {}", (b * sc.batch_size.max(1) + chunk.len()).min(records.len()), records.len());
    }
    if sc.fuse {
        fuse_predictions(&predicted, cfg.data.size, &dir.join("volumes"))?;
    }
    Ok(())
}

pub fn prediction_stem(subject: &str, o: Orientation, idx: usize) -> String {
    format!("{subject}_{o}_{idx:03}")
}

type Predicted = BTreeMap<(String, Orientation), BTreeMap<usize, Array2<f64>>>;

/// Stacks each subject's per-orientation predictions (missing slices are
/// zero) and fuses subjects that have all three orientations.
fn fuse_predictions(predicted: &Predicted, size: usize, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let subjects: std::collections::BTreeSet<&String> = predicted.keys().map(|(s, _)| s).collect();
    for subject in subjects {
        let mut vols = Vec::new();
        for o in Orientation::ALL {
            let Some(slices) = predicted.get(&(subject.clone(), o)) else { break };
            let full: Vec<Array2<f64>> =
                (0..size).map(|i| slices.get(&i).cloned().unwrap_or_else(|| Array2::zeros((size, size)))).collect();
            vols.push(stack_orientation(&full, o, subject)?);
        }
        if vols.len() == 3 {
            let fused = fuse_volumes(&vols)?;
            write_raw3(&out.join(format!("{subject}_fused.raw")), &fused.mapv(|v| v as f32))?;
        }
    }
    Ok(())
}

/// Reads the predictions of a directory written by `sample`, preferring the
/// exact `.raw` copy over the PNG.
fn read_predictions(dir: &Path) -> Result<Vec<(PredictionMeta, Array2<f64>)>> {
    let mut metas: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    metas.sort();
    if metas.is_empty() {
        return Err(Error::Data(format!("no predictions found in {}", dir.display())));
    }
    metas
        .into_iter()
        .map(|p| {
            let meta: PredictionMeta = serde_json::from_str(&std::fs::read_to_string(&p)?)
                .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            let raw = p.with_extension("raw");
            let img = if raw.exists() { read_raw(&raw)? } else { read_png16(&p.with_extension("png"))? };
            Ok((meta, img.mapv(f64::from)))
        })
        .collect()
}

fn score(method: &str, preds: &[(PredictionMeta, Array2<f64>)], truth: &BTreeMap<(String, Orientation, usize), PathBuf>, f: &Featurizer) -> Result<EvalReport> {
    let rows = preds
        .iter()
        .map(|(m, img)| {
            let key = (m.subject_id.clone(), m.orientation, m.slice_index);
            let path = truth
                .get(&key)
                .ok_or_else(|| Error::Data(format!("no ground truth for {} {} {}", key.0, key.1, key.2)))?;
            let reference = read_raw(path)?.mapv(f64::from);
            SliceMetrics::compute(&m.subject_id, &format!("{}:{}", m.orientation, m.slice_index), img, &reference, f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(method, rows))
}

fn evaluate_cmd(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let dataset = require(&cfg.paths.dataset, "paths.dataset")?;
    let preds_dir = require(&cfg.paths.predictions, "paths.predictions")?;
    let truth: BTreeMap<_, _> = manifest(dataset)?
        .into_iter()
        .map(|r| ((r.subject_id, r.orientation, r.slice_index), dataset.join(r.y0_sd)))
        .collect();
    let f = Featurizer::new(cfg.metrics.featurizer_seed);
    let mut report = score("prediction", &read_predictions(preds_dir)?, &truth, &f)?;
    let mut table = report.table();
    if let Some(b) = &cfg.paths.baseline {
        let base = score("baseline", &read_predictions(b)?, &truth, &f)?;
        report.compare(&base)?;
        table.push_str(base.table().lines().last().unwrap_or_default());
        table.push('\n');
    }
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(dir.join("per_slice.csv"), report.per_slice_csv())?;
    std::fs::write(dir.join("table.md"), &table)?;
    println!("{table}");
    Ok(())
}

fn cka_cmd(cfg: &RunConfig, dir: &Path, allow_mismatch: bool) -> Result<()> {
    let dataset = require(&cfg.paths.dataset, "paths.dataset")?;
    let (model, schedule, _) = load_model(cfg, allow_mismatch)?;
    let mut records = manifest(dataset)?;
    records.truncate(cfg.analysis.n_samples);
    let samples = load_samples(dataset, &records, true)?;
    let layers = if cfg.analysis.layers.is_empty() { model.config().layer_ids() } else { cfg.analysis.layers.clone() };
    let acts = capture_activations(&model, &samples, &layers, &schedule, &cfg.capture_config())?;
    let mut summary = BTreeMap::new();
    for (stage, name) in [(Stage::Encoder, "encoder"), (Stage::Decoder, "decoder")] {
        let (pet, mri) = split_by_branch(&acts, stage);
        if pet.is_empty() {
            continue;
        }
        let m = cka_matrix(&pet, &mri)?;
        std::fs::write(dir.join(format!("cka_{name}.csv")), m.to_csv())?;
        m.write_heatmap(&dir.join(format!("cka_{name}.png")), 24)?;
        summary.insert(name, m);
    }
    std::fs::write(dir.join("cka.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}
