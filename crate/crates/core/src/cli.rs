//! Command-line entry point: dataset preparation, self-training, ensemble
//! prediction, evaluation and mosaics, all driven by one TOML experiment
//! file.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_dataset, make_folds, read_label_csv, render_mosaic, save_image_png, synthetic_split, write_label_csv, Dataset,
    DatasetKind, FoldAssignment, Geometry, MosaicLayout, SeismicSample, SplitTag, PATCH_SIZE,
};
use crate::inference::{
    checkpoint_inventory, evaluate, select, write_submission, AverageSpace, Ensemble, EnsembleMember, EnsembleSpec,
    InventoryEntry, PredictionCache, Selector,
};
use crate::metrics::{mean_ap, EvaluationReport};
use crate::model::SegmentationModelSpec;
use crate::self_training::{round_dir, run_self_training, SelfTrainingConfig, SelfTrainingJob, SelfTrainingOutput};
use crate::trainer::TrainingConfig;
use crate::{parallel, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `images/*.png`, `train.csv` and optionally
    /// `holdout.csv`.
    pub dir: PathBuf,
    /// Fold file written by `prepare`; defaults to `<dir>/folds.csv`.
    #[serde(default)]
    pub folds: Option<PathBuf>,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
}

fn default_patch_size() -> usize {
    PATCH_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub tta: bool,
    pub average: AverageSpace,
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tta: true,
            average: AverageSpace::Probability,
            batch_size: 16,
        }
    }
}

/// Everything an experiment needs, read from one TOML document. Relative
/// paths are resolved against the document's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub output: OutputConfig,
    #[serde(default)]
    pub geometry: Geometry,
    pub models: Vec<SegmentationModelSpec>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub self_training: SelfTrainingConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.dir);
        if let Some(f) = &mut cfg.data.folds {
            resolve(f);
        }
        resolve(&mut cfg.output.dir);
        for m in &mut cfg.models {
            if let Some(w) = &mut m.pretrained_weights {
                resolve(w);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("at least one [[models]] entry is required".into()));
        }
        self.geometry.validate()?;
        if self.geometry.source != self.data.patch_size {
            return Err(Error::Config(format!(
                "geometry source size {} differs from the data patch size {}",
                self.geometry.source, self.data.patch_size
            )));
        }
        for m in &self.models {
            m.validate()?;
            if m.input_size != self.geometry.padded {
                return Err(Error::Config(format!(
                    "model {} takes {} pixel inputs but the geometry pads to {}",
                    m.backbone, m.input_size, self.geometry.padded
                )));
            }
        }
        self.training.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self).map_err(|e| Error::Format(e.to_string()))?;
        let bytes = serde_json::to_vec(&value).map_err(|e| Error::Format(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    pub fn folds_path(&self) -> PathBuf {
        self.data.folds.clone().unwrap_or_else(|| self.data.dir.join("folds.csv"))
    }
}

/// Labeled training images, unlabeled pool and optional labeled holdout.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub labeled: Dataset,
    pub pool: Dataset,
    pub holdout: Option<Dataset>,
}

/// Load a data directory: `train.csv` labels the training set, the ids in
/// `holdout.csv` (if present) form the holdout, every other image is pool.
pub fn load_experiment_data(dir: &Path, patch_size: usize) -> Result<ExperimentData> {
    let all = load_dataset(dir, patch_size)?;
    let holdout_path = dir.join("holdout.csv");
    let holdout_labels = if holdout_path.is_file() {
        Some(read_label_csv(&holdout_path, patch_size, patch_size)?)
    } else {
        None
    };
    let mut labeled = Vec::new();
    let mut pool = Vec::new();
    let mut holdout = Vec::new();
    for s in all.into_samples() {
        match holdout_labels.as_ref().and_then(|h| h.get(&s.id)) {
            Some(mask) => {
                if s.mask.is_some() {
                    return Err(Error::Validation(format!(
                        "`{}` is labeled in both train.csv and holdout.csv",
                        s.id
                    )));
                }
                holdout.push(SeismicSample::new(s.id, s.image, Some(mask.clone()), SplitTag::Holdout)?);
            }
            None if s.mask.is_some() => labeled.push(s),
            None => pool.push(s),
        }
    }
    if let Some(h) = &holdout_labels {
        if let Some(id) = h.keys().find(|id| !holdout.iter().any(|s| &s.id == *id)) {
            return Err(Error::io(dir.join("images").join(format!("{id}.png")), "holdout image is missing"));
        }
    }
    Ok(ExperimentData {
        labeled: Dataset::new(labeled, DatasetKind::GroundTruth)?,
        pool: Dataset::new(pool, DatasetKind::Mixed)?,
        holdout: match holdout_labels {
            Some(_) => Some(Dataset::new(holdout, DatasetKind::GroundTruth)?),
            None => None,
        },
    })
}

/// Dataset integrity record written by `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub patch_size: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub holdout: usize,
    pub n_folds: usize,
    pub seed: u64,
    /// SHA-256 over the sorted ids of every image, one per line.
    pub ids_sha256: String,
    pub command: Vec<String>,
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Config(format!(
                    "{} is in use by another run (delete {} if that run is gone)",
                    dir.display(),
                    path.display()
                )),
                _ => Error::io(&path, e),
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Device {
    Cpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Pool,
    Holdout,
    Labeled,
}

#[derive(Debug, Parser)]
#[command(name = "saltseg", version, about = "Semi-supervised salt segmentation with ensemble self-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct RunFlags {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override `training.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Require bit-reproducible results; recorded in manifests.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, value_enum, default_value = "cpu")]
    pub device: Device,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assign labeled images to folds and record dataset integrity.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        /// Where `folds.csv` and `dataset.json` go (default: the data dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = PATCH_SIZE)]
        size: usize,
    },
    /// Write a synthetic data directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        labeled: usize,
        #[arg(long, default_value_t = 800)]
        pool: usize,
        #[arg(long, default_value_t = 100)]
        holdout: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every self-training round.
    Selftrain {
        #[command(flatten)]
        run: RunFlags,
        /// Continue in an output directory that already holds rounds.
        #[arg(long)]
        resume: bool,
    },
    /// Predict with the checkpoints chosen by a selector and write a submission.
    Predict {
        #[command(flatten)]
        run: RunFlags,
        /// e.g. `rounds in {2,3}, folds=*, snapshots=*, arch=*`
        #[arg(long)]
        select: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "pool")]
        split: SplitChoice,
    },
    /// Score an ensemble on the holdout, or a submission file against labels.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "predictions")]
        select: Option<String>,
        #[arg(long, requires = "labels")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = PATCH_SIZE)]
        size: usize,
        /// Per-image AP as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Render labeled patches with salt outlines into one PNG.
    Mosaic {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 6)]
        rows: usize,
        #[arg(long, default_value_t = 12)]
        cols: usize,
        #[arg(long, default_value_t = PATCH_SIZE)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ids_digest(ids: &[String]) -> String {
    let mut sorted = ids.to_vec();
    sorted.sort();
    let mut h = Sha256::new();
    for id in &sorted {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_prepare(data: &Path, out: &Path, n_folds: usize, seed: u64, size: usize, command: Vec<String>) -> Result<DatasetManifest> {
    let d = load_experiment_data(data, size)?;
    let folds = make_folds(&d.labeled.ids(), n_folds, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    folds.write_csv(&out.join("folds.csv"))?;
    let mut all = d.labeled.ids();
    all.extend(d.pool.ids());
    if let Some(h) = &d.holdout {
        all.extend(h.ids());
    }
    let manifest = DatasetManifest {
        patch_size: size,
        labeled: d.labeled.len(),
        unlabeled: d.pool.len(),
        holdout: d.holdout.as_ref().map_or(0, Dataset::len),
        n_folds,
        seed,
        ids_sha256: ids_digest(&all),
        command,
    };
    write_json(&out.join("dataset.json"), &manifest)?;
    Ok(manifest)
}

pub fn cmd_synth(out: &Path, labeled: usize, pool: usize, holdout: usize, size: usize, seed: u64) -> Result<()> {
    let s = synthetic_split(labeled, pool, holdout, size, seed)?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for d in [&s.labeled, &s.pool, &s.holdout] {
        for sample in d.samples() {
            save_image_png(&sample.image, &images.join(format!("{}.png", sample.id)))?;
        }
    }
    let masks = |d: &Dataset| -> Vec<(String, crate::data::Mask)> {
        d.samples()
            .iter()
            .map(|x| (x.id.clone(), x.mask.clone().expect("labeled")))
            .collect()
    };
    let train = masks(&s.labeled);
    write_label_csv(&out.join("train.csv"), train.iter().map(|(i, m)| (i.as_str(), m)))?;
    if holdout > 0 {
        let hold = masks(&s.holdout);
        write_label_csv(&out.join("holdout.csv"), hold.iter().map(|(i, m)| (i.as_str(), m)))?;
    }
    Ok(())
}

/// Settings resolved from `RunFlags` and the experiment file.
struct Resolved {
    config: ExperimentConfig,
    hash: String,
    workers: usize,
}

fn resolve(run: &RunFlags) -> Result<Resolved> {
    let mut config = ExperimentConfig::load(&run.config)?;
    if let Some(seed) = run.seed {
        config.training.seed = seed;
    }
    config.validate()?;
    let hash = config.hash()?;
    Ok(Resolved {
        config,
        hash,
        workers: run.workers.unwrap_or_else(parallel::default_workers),
    })
}

#[derive(Debug, Serialize)]
struct ExperimentManifest<'a> {
    config_hash: &'a str,
    config: &'a ExperimentConfig,
    deterministic: bool,
    device: &'static str,
    command: Vec<String>,
}

/// One row per round plus, with three or more rounds, the ensemble of
/// rounds 2..K.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub label: String,
    pub members: usize,
    pub pseudo_labels: usize,
    pub holdout_map: Option<f64>,
}

pub fn round_table(
    out: &SelfTrainingOutput,
    holdout: Option<&Dataset>,
    geometry: &Geometry,
    tta: bool,
    workers: usize,
) -> Result<Vec<RoundRow>> {
    let mut rows: Vec<RoundRow> = out
        .rounds
        .iter()
        .map(|r| RoundRow {
            label: format!("round {}", r.manifest.round),
            members: r.members.len(),
            pseudo_labels: r.pseudo_labels.len(),
            holdout_map: r.manifest.holdout_map,
        })
        .collect();
    if out.rounds.len() >= 3 {
        let members: Vec<EnsembleMember> = out.rounds[1..].iter().flat_map(|r| r.members.clone()).collect();
        let n = members.len();
        let map = match holdout {
            Some(h) if !h.is_empty() => {
                let e = Ensemble::new(&EnsembleSpec::new(members, tta)?)?;
                Some(evaluate(&e, h, geometry, workers)?.map_score)
            }
            _ => None,
        };
        rows.push(RoundRow {
            label: format!("rounds 2-{}", out.rounds.len()),
            members: n,
            pseudo_labels: 0,
            holdout_map: map,
        });
    }
    Ok(rows)
}

fn print_table(rows: &[RoundRow]) {
    println!("{:<12} {:>8} {:>14} {:>12}", "ensemble", "members", "pseudo_labels", "holdout_mAP");
    for r in rows {
        let map = r.holdout_map.map_or("-".to_string(), |m| format!("{m:.4}"));
        println!("{:<12} {:>8} {:>14} {:>12}", r.label, r.members, r.pseudo_labels, map);
    }
}

pub fn cmd_selftrain(run: &RunFlags, resume: bool, command: Vec<String>) -> Result<Vec<RoundRow>> {
    let r = resolve(run)?;
    let cfg = &r.config;
    let out_dir = &cfg.output.dir;
    let _lock = DirLock::acquire(out_dir)?;
    if out_dir.join("rounds").exists() && !resume {
        return Err(Error::Config(format!(
            "{} already holds rounds; pass --resume to continue it",
            out_dir.display()
        )));
    }
    let data = load_experiment_data(&cfg.data.dir, cfg.data.patch_size)?;
    let folds_path = cfg.folds_path();
    let folds = FoldAssignment::read_csv(&folds_path)?;
    write_json(
        &out_dir.join("experiment.json"),
        &ExperimentManifest {
            config_hash: &r.hash,
            config: cfg,
            deterministic: run.deterministic,
            device: "cpu",
            command,
        },
    )?;
    let job = SelfTrainingJob {
        labeled: &data.labeled,
        pool: &data.pool,
        holdout: data.holdout.as_ref(),
        specs: &cfg.models,
        folds: &folds,
        geometry: cfg.geometry,
        training: &cfg.training,
        config: &cfg.self_training,
        experiment_hash: Some(r.hash.clone()),
        workers: r.workers,
    };
    let out = run_self_training(&job, Some(out_dir))?;
    let rows = round_table(&out, data.holdout.as_ref(), &cfg.geometry, cfg.self_training.tta, r.workers)?;
    print_table(&rows);
    Ok(rows)
}

/// Final-model checkpoints of every round below an experiment directory.
pub fn experiment_inventory(out_dir: &Path) -> Result<Vec<InventoryEntry>> {
    let rounds = out_dir.join("rounds");
    let mut ks: Vec<usize> = fs::read_dir(&rounds)
        .map_err(|e| Error::io(&rounds, e))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
        .collect();
    ks.sort_unstable();
    let mut all = Vec::new();
    for k in ks {
        let dir = round_dir(out_dir, k).join("checkpoints");
        if dir.is_dir() {
            all.extend(checkpoint_inventory(&dir)?);
        }
    }
    Ok(all)
}

fn selected_ensemble(cfg: &ExperimentConfig, selector: &str) -> Result<(Ensemble, Vec<String>)> {
    let selector = Selector::parse(selector)?;
    let inventory = experiment_inventory(&cfg.output.dir)?;
    let chosen = select(&inventory, &selector)?;
    let members = chosen
        .iter()
        .map(|e| EnsembleMember::load(&e.path))
        .collect::<Result<Vec<_>>>()?;
    let spec = EnsembleSpec::new(members, cfg.inference.tta)?.with_average(cfg.inference.average);
    let ensemble = Ensemble::new(&spec)?
        .with_batch_size(cfg.inference.batch_size)
        .with_cache(PredictionCache::new(cfg.output.dir.join("prediction_cache")));
    let paths = chosen.iter().map(|e| e.path.display().to_string()).collect();
    Ok((ensemble, paths))
}

#[derive(Debug, Serialize)]
struct PredictionManifest<'a> {
    config_hash: &'a str,
    selector: &'a str,
    split: SplitChoice,
    members: Vec<String>,
    images: usize,
    deterministic: bool,
    command: Vec<String>,
}

pub fn cmd_predict(run: &RunFlags, selector: &str, out: &Path, split: SplitChoice, command: Vec<String>) -> Result<usize> {
    let r = resolve(run)?;
    let cfg = &r.config;
    let (ensemble, members) = selected_ensemble(cfg, selector)?;
    let data = load_experiment_data(&cfg.data.dir, cfg.data.patch_size)?;
    let target = match split {
        SplitChoice::Pool => data.pool,
        SplitChoice::Labeled => data.labeled,
        SplitChoice::Holdout => data
            .holdout
            .ok_or_else(|| Error::Config(format!("{} has no holdout.csv", cfg.data.dir.display())))?,
    };
    let masks = ensemble.predict_masks(&target, &cfg.geometry, r.workers)?;
    write_submission(&masks, cfg.geometry.source, out)?;
    let mut manifest_path = out.as_os_str().to_owned();
    manifest_path.push(".manifest.json");
    write_json(
        Path::new(&manifest_path),
        &PredictionManifest {
            config_hash: &r.hash,
            selector,
            split,
            members,
            images: masks.len(),
            deterministic: run.deterministic,
            command,
        },
    )?;
    println!("wrote {} predictions from {} checkpoints to {}", masks.len(), ensemble.len(), out.display());
    Ok(masks.len())
}

/// Score a submission file against a label file over their shared ids.
pub fn evaluate_files(predictions: &Path, labels: &Path, size: usize) -> Result<EvaluationReport> {
    let pred = read_label_csv(predictions, size, size)?;
    let truth = read_label_csv(labels, size, size)?;
    let shared: Vec<(&str, _, _)> = truth
        .iter()
        .filter_map(|(id, t)| pred.get(id).map(|p| (id.as_str(), t, p)))
        .collect();
    if shared.is_empty() {
        return Err(Error::Validation(format!(
            "{} and {} have no image ids in common",
            predictions.display(),
            labels.display()
        )));
    }
    mean_ap(shared)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    config: Option<&Path>,
    selector: Option<&str>,
    predictions: Option<&Path>,
    labels: Option<&Path>,
    size: usize,
    report: Option<&Path>,
    workers: Option<usize>,
) -> Result<EvaluationReport> {
    let result = match (predictions, labels, selector, config) {
        (Some(p), Some(l), _, _) => evaluate_files(p, l, size)?,
        (None, _, Some(sel), Some(c)) => {
            let cfg = ExperimentConfig::load(c)?;
            cfg.validate()?;
            let data = load_experiment_data(&cfg.data.dir, cfg.data.patch_size)?;
            let holdout = data
                .holdout
                .filter(|h| !h.is_empty())
                .ok_or_else(|| Error::Validation(format!("{} has no holdout images", cfg.data.dir.display())))?;
            let (ensemble, _) = selected_ensemble(&cfg, sel)?;
            evaluate(&ensemble, &holdout, &cfg.geometry, workers.unwrap_or_else(parallel::default_workers))?
        }
        _ => {
            return Err(Error::Config(
                "evaluate needs --predictions with --labels, or --config with --select".into(),
            ))
        }
    };
    if let Some(path) = report {
        result.save_csv(path)?;
    }
    println!("images {}  mAP {:.4}", result.per_image_ap.len(), result.map_score);
    Ok(result)
}

pub fn cmd_mosaic(data: &Path, rows: usize, cols: usize, size: usize, out: &Path) -> Result<(u32, u32)> {
    let d = load_dataset(data, size)?;
    let labeled: Vec<String> = d.samples().iter().filter(|s| s.mask.is_some()).map(|s| s.id.clone()).collect();
    if labeled.len() < rows * cols {
        return Err(Error::Validation(format!(
            "a {rows}x{cols} mosaic needs {} labeled patches, found {}",
            rows * cols,
            labeled.len()
        )));
    }
    let img = render_mosaic(&MosaicLayout::from_ids(&labeled, rows, cols, size), &d)?;
    img.save(out).map_err(|e| Error::io(out, e))?;
    Ok(img.dimensions())
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let command: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Prepare {
            data,
            out,
            folds,
            seed,
            size,
        } => {
            let out = out.unwrap_or_else(|| data.clone());
            cmd_prepare(&data, &out, folds, seed, size, command).map(|m| {
                println!(
                    "labeled {}  unlabeled {}  holdout {}  folds {}",
                    m.labeled, m.unlabeled, m.holdout, m.n_folds
                )
            })
        }
        Command::Synth {
            out,
            labeled,
            pool,
            holdout,
            size,
            seed,
        } => cmd_synth(&out, labeled, pool, holdout, size, seed),
        Command::Selftrain { run, resume } => cmd_selftrain(&run, resume, command).map(|_| ()),
        Command::Predict { run, select, out, split } => cmd_predict(&run, &select, &out, split, command).map(|_| ()),
        Command::Evaluate {
            config,
            select,
            predictions,
            labels,
            size,
            report,
            workers,
        } => cmd_evaluate(
            config.as_deref(),
            select.as_deref(),
            predictions.as_deref(),
            labels.as_deref(),
            size,
            report.as_deref(),
            workers,
        )
        .map(|_| ()),
        Command::Mosaic {
            data,
            rows,
            cols,
            size,
            out,
        } => cmd_mosaic(&data, rows, cols, size, &out).map(|(w, h)| println!("wrote {w}x{h} mosaic to {}", out.display())),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
