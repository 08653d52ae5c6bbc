//! Ensemble self-training: train an ensemble on ground truth, pseudo-label
//! the unlabeled pool with it, retrain from fresh weights with those labels,
//! and repeat for the configured number of rounds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{decode_rle, encode_rle, Dataset, DatasetKind, FoldAssignment, Geometry, Mask, SeismicSample, SplitTag};
use crate::inference::{binarize, evaluate, Ensemble, EnsembleMember, EnsembleSpec, MemberTag, BINARIZE_THRESHOLD};
use crate::metrics::mask_confidence;
use crate::model::{ModelParameters, SegmentationModelSpec};
use crate::trainer::{
    derive_seed, finetune_run, params_digest, read_json, train_run, write_json, FoldSplit, InitSource, RunContext,
    RunOutput, TrainingConfig,
};
use crate::{parallel, Error, Result};

/// How rounds after the first use their pseudo-labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    /// Train on pseudo-labels only, then fine-tune on ground truth.
    #[default]
    Sequential,
    /// Train once on ground truth and pseudo-labels together.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainingConfig {
    pub mode: PseudoMode,
    /// Flip TTA while pseudo-labeling and scoring the holdout.
    pub tta: bool,
    /// Store all-salt pseudo masks as empty, mirroring the ground-truth
    /// labeling convention. Off by default.
    pub full_salt_as_empty: bool,
}

impl Default for SelfTrainingConfig {
    fn default() -> Self {
        Self {
            mode: PseudoMode::Sequential,
            tta: true,
            full_salt_as_empty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub mask: Mask,
    /// Confidence of the soft ensemble mask the binary mask came from.
    pub confidence: f64,
}

/// Pseudo-labels produced at the end of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub round: usize,
    pub entries: BTreeMap<String, PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `id,rle_mask,confidence` rows sorted by id.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
        w.write_record(["id", "rle_mask", "confidence"]).map_err(|e| Error::io(path, e))?;
        for (id, e) in &self.entries {
            w.write_record([id.as_str(), &encode_rle(&e.mask), &e.confidence.to_string()])
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, size: usize, round: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
        let headers = r.headers().map_err(|e| Error::io(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "rle_mask", "confidence"] {
            return Err(Error::Format(format!(
                "{}: expected header `id,rle_mask,confidence`",
                path.display()
            )));
        }
        let mut entries = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::io(path, e))?;
            let confidence: f64 = rec[2]
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad confidence `{}`", path.display(), &rec[2])))?;
            let label = PseudoLabel {
                mask: decode_rle(&rec[1], size, size)?,
                confidence,
            };
            if entries.insert(rec[0].to_string(), label).is_some() {
                return Err(Error::Validation(format!("{}: duplicate id `{}`", path.display(), &rec[0])));
            }
        }
        Ok(Self { round, entries })
    }

    /// Pool images paired with their pseudo-labels.
    pub fn dataset(&self, pool: &Dataset) -> Result<Dataset> {
        let samples = self
            .entries
            .iter()
            .map(|(id, e)| {
                let s = pool.get(id).ok_or_else(|| Error::Lookup(id.clone()))?;
                SeismicSample::new(id.clone(), s.image.clone(), Some(e.mask.clone()), SplitTag::Unlabeled)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, DatasetKind::Pseudo)
    }
}

/// Label every pool image with the ensemble's most probable class and keep
/// those whose confidence reaches `thresh`.
pub fn generate_pseudo_labels(
    ensemble: &Ensemble,
    pool: &Dataset,
    geometry: &Geometry,
    thresh: f64,
    round: usize,
    full_salt_as_empty: bool,
    workers: usize,
) -> Result<PseudoLabelSet> {
    let probs = ensemble.predict_dataset(pool, geometry, workers)?;
    let mut entries = BTreeMap::new();
    for (s, p) in pool.samples().iter().zip(&probs) {
        let confidence = mask_confidence(p.data())?;
        if confidence < thresh {
            continue;
        }
        let mut mask = binarize(p, BINARIZE_THRESHOLD);
        if full_salt_as_empty && mask.count() == mask.data().len() {
            mask = Mask::zeros(mask.height(), mask.width());
        }
        entries.insert(s.id.clone(), PseudoLabel { mask, confidence });
    }
    Ok(PseudoLabelSet { round, entries })
}

/// Inputs of a self-training experiment.
#[derive(Debug, Clone)]
pub struct SelfTrainingJob<'a> {
    pub labeled: &'a Dataset,
    pub pool: &'a Dataset,
    /// Ground-truth images kept out of training, scored after every round.
    pub holdout: Option<&'a Dataset>,
    pub specs: &'a [SegmentationModelSpec],
    pub folds: &'a FoldAssignment,
    pub geometry: Geometry,
    pub training: &'a TrainingConfig,
    pub config: &'a SelfTrainingConfig,
    /// Hash of the experiment configuration the caller loaded, if any.
    pub experiment_hash: Option<String>,
    pub workers: usize,
}

impl SelfTrainingJob<'_> {
    /// Digest of everything that determines the results.
    pub fn config_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Fingerprint<'a> {
            training: &'a TrainingConfig,
            self_training: &'a SelfTrainingConfig,
            specs: &'a [SegmentationModelSpec],
            geometry: &'a Geometry,
            folds: &'a BTreeMap<String, usize>,
            pool: Vec<String>,
            holdout: Option<Vec<String>>,
        }
        let f = Fingerprint {
            training: self.training,
            self_training: self.config,
            specs: self.specs,
            geometry: &self.geometry,
            folds: self.folds.assignment(),
            pool: self.pool.ids(),
            holdout: self.holdout.map(Dataset::ids),
        };
        let json = serde_json::to_vec(&f).map_err(|e| Error::Format(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(json)))
    }
}

/// One training phase of one (spec, fold) job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub init: InitSource,
    pub train_size: usize,
    /// Digest of the parameters at the end of the phase.
    pub final_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobLineage {
    pub spec_index: usize,
    pub arch: String,
    pub fold: usize,
    pub phases: Vec<PhaseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub tag: MemberTag,
    /// Relative to the round directory.
    pub path: Option<PathBuf>,
    pub digest: String,
}

/// Written last into `rounds/<k>/manifest.json`; its presence marks the
/// round as complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundManifest {
    pub round: usize,
    pub config_hash: String,
    pub experiment_hash: Option<String>,
    pub mode: PseudoMode,
    /// Pseudo-labels consumed by this round's training.
    pub pseudo_labels_used: usize,
    /// Pseudo-labels produced at the end of this round.
    pub pseudo_labels_produced: usize,
    pub members: Vec<MemberRecord>,
    pub lineage: Vec<JobLineage>,
    pub holdout_map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub manifest: RoundManifest,
    pub members: Vec<EnsembleMember>,
    pub pseudo_labels: PseudoLabelSet,
}

#[derive(Debug, Clone)]
pub struct SelfTrainingOutput {
    pub rounds: Vec<RoundRecord>,
}

impl SelfTrainingOutput {
    /// `(round, holdout mAP)` for every round.
    pub fn holdout_table(&self) -> Vec<(usize, Option<f64>)> {
        self.rounds.iter().map(|r| (r.manifest.round, r.manifest.holdout_map)).collect()
    }
}

/// Directory of round `k` below an experiment directory.
pub fn round_dir(out_dir: &Path, round: usize) -> PathBuf {
    out_dir.join("rounds").join(round.to_string())
}

fn job_dir(round: &Path, part: &str, spec_index: usize, arch: &str, fold: usize) -> PathBuf {
    round.join(part).join(format!("{spec_index}-{arch}")).join(format!("fold_{fold}"))
}

struct JobResult {
    lineage: JobLineage,
    members: Vec<(EnsembleMember, Option<PathBuf>)>,
}

fn phase_record(out: &RunOutput) -> Result<PhaseRecord> {
    Ok(PhaseRecord {
        phase: out.manifest.phase.clone(),
        init: out.manifest.init.clone(),
        train_size: out.manifest.train_ids,
        final_digest: params_digest(&out.final_params)?,
    })
}

/// Train one (spec, fold) job of round `k`.
fn run_job(
    job: &SelfTrainingJob,
    round: usize,
    spec_index: usize,
    fold: usize,
    pseudo: Option<&Dataset>,
    dir: Option<&Path>,
) -> Result<JobResult> {
    let spec = &job.specs[spec_index];
    let arch = spec.backbone.as_str();
    let gt = FoldSplit::from_folds(job.labeled, job.folds, fold)?;
    let init_seed = derive_seed(job.training.seed, &[round as u64, spec_index as u64, fold as u64]);
    let ctx = |part: &str, phase: &str| RunContext {
        round: Some(round),
        phase: phase.to_string(),
        out_dir: dir.map(|d| job_dir(d, part, spec_index, arch, fold)),
    };
    let mut phases = Vec::new();
    let last = match (round, pseudo.filter(|p| !p.is_empty()), job.config.mode) {
        (1, _, _) | (_, None, PseudoMode::Joint) => train_run(spec, &gt, &job.geometry, job.training, init_seed, &ctx("checkpoints", "train"))?,
        (_, None, PseudoMode::Sequential) => {
            // Nothing to pre-train on: the ground-truth phase starts from fresh weights.
            train_run(spec, &gt, &job.geometry, job.training, init_seed, &ctx("checkpoints", "finetune"))?
        }
        (_, Some(p), PseudoMode::Sequential) => {
            let pre = train_run(spec, &gt.with_train(p.clone()), &job.geometry, job.training, init_seed, &ctx("pseudo_phase", "pseudo"))?;
            phases.push(phase_record(&pre)?);
            let from = format!("round {round} pseudo");
            finetune_run(spec, &gt, &job.geometry, job.training, &pre.final_params, &from, &ctx("checkpoints", "finetune"))?
        }
        (_, Some(p), PseudoMode::Joint) => {
            let both = gt.train.union(p)?;
            train_run(spec, &gt.with_train(both), &job.geometry, job.training, init_seed, &ctx("checkpoints", "joint"))?
        }
    };
    phases.push(phase_record(&last)?);
    let members = last
        .snapshots
        .into_iter()
        .map(|s| {
            let source = match &s.path {
                Some(p) => p.display().to_string(),
                None => format!("round {round} {arch} fold {fold} snapshot {}", s.cycle),
            };
            (EnsembleMember::from_params(s.params, source), s.path)
        })
        .collect();
    Ok(JobResult {
        lineage: JobLineage {
            spec_index,
            arch: arch.to_string(),
            fold,
            phases,
        },
        members,
    })
}

fn load_round(dir: &Path, round: usize, config_hash: &str, size: usize) -> Result<RoundRecord> {
    let manifest: RoundManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.config_hash != config_hash {
        return Err(Error::Orchestration(format!(
            "{} was produced by a different configuration ({} vs {config_hash}); use a fresh output directory",
            dir.display(),
            manifest.config_hash
        )));
    }
    let mut members = Vec::with_capacity(manifest.members.len());
    for m in &manifest.members {
        let rel = m.path.as_ref().ok_or_else(|| {
            Error::Orchestration(format!("round {round} manifest lists a member without a checkpoint path"))
        })?;
        let path = dir.join(rel);
        if !path.is_file() {
            return Err(Error::Orchestration(format!(
                "round {round} checkpoint {} is missing; delete {} to retrain the round",
                path.display(),
                dir.display()
            )));
        }
        let member = EnsembleMember::load(&path)?;
        if params_digest(&member.params)? != m.digest {
            return Err(Error::Orchestration(format!(
                "round {round} checkpoint {} does not match its manifest digest",
                path.display()
            )));
        }
        members.push(member);
    }
    let labels = dir.join("pseudo_labels.csv");
    if !labels.is_file() {
        return Err(Error::Orchestration(format!("round {round} pseudo-labels {} are missing", labels.display())));
    }
    let pseudo_labels = PseudoLabelSet::read_csv(&labels, size, round)?;
    Ok(RoundRecord {
        manifest,
        members,
        pseudo_labels,
    })
}

/// Run all rounds. With `out_dir`, every artifact is written below
/// `rounds/<k>/` and completed rounds found there are reused.
pub fn run_self_training(job: &SelfTrainingJob, out_dir: Option<&Path>) -> Result<SelfTrainingOutput> {
    job.training.validate()?;
    if job.specs.is_empty() {
        return Err(Error::Config("self-training needs at least one model spec".into()));
    }
    if job.training.rounds == 0 {
        return Err(Error::Config("self-training needs at least one round".into()));
    }
    if let Some(s) = job.pool.samples().iter().find(|s| job.labeled.get(&s.id).is_some()) {
        return Err(Error::Validation(format!("pool image `{}` is also labeled", s.id)));
    }
    let config_hash = job.config_hash()?;
    let workers = job.workers.max(1);
    let mut rounds: Vec<RoundRecord> = Vec::new();
    for k in 1..=job.training.rounds {
        let dir = out_dir.map(|d| round_dir(d, k));
        if let Some(d) = dir.as_deref().filter(|d| d.join("manifest.json").is_file()) {
            rounds.push(load_round(d, k, &config_hash, job.geometry.source)?);
            continue;
        }
        let pseudo = match rounds.last() {
            Some(prev) => Some(prev.pseudo_labels.dataset(job.pool)?),
            None => None,
        };
        let jobs: Vec<(usize, usize)> = (0..job.specs.len())
            .flat_map(|s| (0..job.folds.n_folds()).map(move |f| (s, f)))
            .collect();
        let results = parallel::map(&jobs, workers, |_, &(s, f)| run_job(job, k, s, f, pseudo.as_ref(), dir.as_deref()))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let mut lineage = Vec::new();
        let mut members = Vec::new();
        let mut records = Vec::new();
        for r in results {
            lineage.push(r.lineage);
            for (m, path) in r.members {
                records.push(MemberRecord {
                    tag: m.tag.clone(),
                    path: match (&path, &dir) {
                        (Some(p), Some(d)) => Some(p.strip_prefix(d).unwrap_or(p).to_path_buf()),
                        _ => None,
                    },
                    digest: params_digest(&m.params)?,
                });
                members.push(m);
            }
        }

        let ensemble = Ensemble::new(&EnsembleSpec::new(members.clone(), job.config.tta)?)?;
        let pseudo_labels = generate_pseudo_labels(
            &ensemble,
            job.pool,
            &job.geometry,
            job.training.thresh,
            k,
            job.config.full_salt_as_empty,
            workers,
        )?;
        let holdout_map = match job.holdout {
            Some(h) if !h.is_empty() => Some(evaluate(&ensemble, h, &job.geometry, workers)?.map_score),
            _ => None,
        };
        let manifest = RoundManifest {
            round: k,
            config_hash: config_hash.clone(),
            experiment_hash: job.experiment_hash.clone(),
            mode: job.config.mode,
            pseudo_labels_used: if k == 1 { 0 } else { pseudo.as_ref().map_or(0, Dataset::len) },
            pseudo_labels_produced: pseudo_labels.len(),
            members: records,
            lineage,
            holdout_map,
        };
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            pseudo_labels.write_csv(&d.join("pseudo_labels.csv"))?;
            write_json(&d.join("manifest.json"), &manifest)?;
        }
        rounds.push(RoundRecord {
            manifest,
            members,
            pseudo_labels,
        });
    }
    Ok(SelfTrainingOutput { rounds })
}

/// Checks that every round started from fresh weights: the first phase of
/// each job is a random or pretrained initialisation, and any later phase
/// continues from a phase of the same job in the same round.
pub fn check_lineage(manifest: &RoundManifest) -> Result<()> {
    for job in &manifest.lineage {
        let first = job.phases.first().ok_or_else(|| {
            Error::Orchestration(format!("round {} job {} fold {} has no phases", manifest.round, job.arch, job.fold))
        })?;
        if !first.init.is_fresh() {
            return Err(Error::Orchestration(format!(
                "round {} job {} fold {} did not start from fresh weights",
                manifest.round, job.arch, job.fold
            )));
        }
        for pair in job.phases.windows(2) {
            match &pair[1].init {
                InitSource::Continuation { params_digest, .. } if *params_digest == pair[0].final_digest => {}
                _ => {
                    return Err(Error::Orchestration(format!(
                        "round {} job {} fold {}: phase `{}` does not continue from `{}`",
                        manifest.round, job.arch, job.fold, pair[1].phase, pair[0].phase
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Parameters of every member of a loaded round, for building ensembles.
pub fn round_parameters(record: &RoundRecord) -> Vec<&ModelParameters> {
    record.members.iter().map(|m| &m.params).collect()
}

#[cfg(test)]
mod tests;
