//! Single-model training: BCE warm-up then Lovász hinge, cyclic cosine
//! learning rate with a snapshot at the end of every cycle.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, Dataset, FoldAssignment, Geometry, Image, SeismicSample};
use crate::inference::binarize;
use crate::losses::{bce_loss, lovasz_hinge};
use crate::metrics::mean_ap;
use crate::model::{Mode, ModelParameters, ParamTags, SegmentationModel, SegmentationModelSpec};
use crate::nn::{sigmoid, HasParams, ParamKind, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum SGD.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Epochs per training run (T).
    pub epochs: usize,
    /// Epochs per cosine cycle (C); one snapshot per cycle.
    pub cycle_len: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Leading epochs trained with BCE before switching to the Lovász hinge.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Self-training rounds (K).
    pub rounds: usize,
    /// Pseudo-labels with confidence below this are dropped.
    #[serde(with = "extended_float")]
    pub thresh: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Training images used to re-estimate normalisation statistics at
    /// the end of every epoch (0 keeps the running averages as trained).
    pub norm_recalibration: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            cycle_len: 50,
            lr_max: 0.001,
            lr_min: 0.0001,
            warmup_epochs: 50,
            batch_size: 32,
            seed: 0,
            rounds: 3,
            thresh: f64::NEG_INFINITY,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 1e-4,
            norm_recalibration: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// Small CPU-sized schedule: 8 epochs in two cycles of 4, the first
    /// cycle BCE, two self-training rounds, Adam with small batches.
    pub fn desk() -> Self {
        Self {
            epochs: 8,
            cycle_len: 4,
            warmup_epochs: 4,
            lr_max: 0.002,
            lr_min: 0.0002,
            batch_size: 4,
            rounds: 2,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycle_len == 0 || self.epochs % self.cycle_len != 0 {
            return Err(Error::Config(format!(
                "epochs ({}) must be a multiple of the cycle length ({})",
                self.epochs, self.cycle_len
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warm-up of {} epochs exceeds the {} training epochs",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("at least one self-training round is required".into()));
        }
        if self.thresh.is_nan() {
            return Err(Error::Config("confidence threshold is NaN".into()));
        }
        Ok(())
    }

    pub fn snapshot_count(&self) -> usize {
        if self.cycle_len == 0 {
            0
        } else {
            self.epochs / self.cycle_len
        }
    }
}

/// `-inf`/`inf` round-trip as strings so JSON manifests can hold them.
pub(crate) mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v < 0.0 { "-inf" } else { "inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                "inf" | "infinity" => Ok(f64::INFINITY),
                other => other.parse().map_err(serde::de::Error::custom),
            },
        }
    }
}

/// Learning rate for epoch `e`: cosine decay from `lr_max` to `lr_min`
/// restarting every cycle.
pub fn lr_at(epoch: usize, config: &TrainingConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::Domain(format!(
            "epoch {epoch} outside a {}-epoch run",
            config.epochs
        )));
    }
    if config.cycle_len == 0 {
        return Err(Error::Config("cycle length must be positive".into()));
    }
    let t = (epoch % config.cycle_len) as f64 / config.cycle_len as f64;
    Ok(config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + (PI * t).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Lovasz,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Lovasz => "lovasz",
        }
    }

    /// Loss and its gradient for a batch of equally sized logit planes.
    pub fn evaluate(&self, logits: &[f64], targets: &[f64], image_len: usize) -> Result<(f64, Vec<f64>)> {
        let l = match self {
            LossKind::Bce => bce_loss(logits, targets)?,
            LossKind::Lovasz => lovasz_hinge(logits, targets, image_len)?,
        };
        Ok((l.value, l.grad))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn loss_for_epoch(epoch: usize, config: &TrainingConfig) -> LossKind {
    if epoch < config.warmup_epochs {
        LossKind::Bce
    } else {
        LossKind::Lovasz
    }
}

/// Epochs after which a snapshot is taken: `e ≡ C-1 (mod C)`.
pub fn snapshot_epochs(config: &TrainingConfig) -> Vec<usize> {
    (0..config.epochs)
        .filter(|e| config.cycle_len > 0 && e % config.cycle_len == config.cycle_len - 1)
        .collect()
}

/// Per-parameter optimizer state, indexed in visiting order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f32,
    weight_decay: f32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: i32,
}

impl Optimizer {
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    pub fn new(config: &TrainingConfig) -> Self {
        Self {
            kind: config.optimizer,
            momentum: config.momentum as f32,
            weight_decay: config.weight_decay as f32,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, model: &mut impl HasParams<f32>, lr: f64) {
        let lr = lr as f32;
        let (mu, wd) = (self.momentum, self.weight_decay);
        self.steps += 1;
        let t = self.steps;
        let kind = self.kind;
        let (first, second) = (&mut self.first, &mut self.second);
        let mut i = 0;
        model.visit_mut(&mut |p| {
            if p.kind != ParamKind::Trainable {
                return;
            }
            if first.len() <= i {
                first.push(vec![0.0; p.value.len()]);
                second.push(if kind == OptimizerKind::Adam { vec![0.0; p.value.len()] } else { Vec::new() });
            }
            let m = &mut first[i];
            match kind {
                OptimizerKind::Sgd => {
                    for ((w, &g), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()) {
                        *v = mu * *v + g + wd * *w;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let v2 = &mut second[i];
                    let c1 = 1.0 - mu.powi(t);
                    let c2 = 1.0 - Self::BETA2.powi(t);
                    for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v2.iter_mut()) {
                        let g = g + wd * *w;
                        *m = mu * *m + (1.0 - mu) * g;
                        *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                    }
                }
            }
            i += 1;
        });
    }
}

/// Training and validation subsets for one run.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub fold: Option<usize>,
    pub train: Dataset,
    pub val: Option<Dataset>,
}

impl FoldSplit {
    /// Samples of `fold` validate, the rest train.
    pub fn from_folds(dataset: &Dataset, folds: &FoldAssignment, fold: usize) -> Result<Self> {
        if fold >= folds.n_folds() {
            return Err(Error::Config(format!("fold {fold} of {}", folds.n_folds())));
        }
        if let Some(s) = dataset.samples().iter().find(|s| folds.fold_of(&s.id).is_none()) {
            return Err(Error::Lookup(s.id.clone()));
        }
        Ok(Self {
            fold: Some(fold),
            train: dataset.filter(|s| folds.fold_of(&s.id) != Some(fold)),
            val: Some(dataset.filter(|s| folds.fold_of(&s.id) == Some(fold))),
        })
    }

    /// Train on everything without validation.
    pub fn whole(dataset: &Dataset) -> Self {
        Self {
            fold: None,
            train: dataset.clone(),
            val: None,
        }
    }

    /// Same validation subset, different training data.
    pub fn with_train(&self, train: Dataset) -> Self {
        Self {
            fold: self.fold,
            train,
            val: self.val.clone(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Config(format!(
                "training set for fold {:?} is empty",
                self.fold
            )));
        }
        if let Some(s) = self.train.samples().iter().find(|s| s.mask.is_none()) {
            return Err(Error::Validation(format!("training sample `{}` has no mask", s.id)));
        }
        if let Some(val) = &self.val {
            let train: BTreeSet<&str> = self.train.samples().iter().map(|s| s.id.as_str()).collect();
            if let Some(s) = val.samples().iter().find(|s| train.contains(s.id.as_str())) {
                return Err(Error::Validation(format!(
                    "sample `{}` is in both the training and validation sets",
                    s.id
                )));
            }
            if let Some(s) = val.samples().iter().find(|s| s.mask.is_none()) {
                return Err(Error::Validation(format!("validation sample `{}` has no mask", s.id)));
            }
        }
        Ok(())
    }
}

/// Where a run's starting weights came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSource {
    Random { seed: u64 },
    Pretrained { path: PathBuf, seed: u64 },
    /// Continued from the parameters of an earlier phase.
    Continuation { from: String, params_digest: String },
}

impl InitSource {
    pub fn is_fresh(&self) -> bool {
        !matches!(self, InitSource::Continuation { .. })
    }
}

/// Hex SHA-256 over a parameter set's serialized form.
pub fn params_digest(params: &ModelParameters) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(params.to_bytes()?)))
}

/// Mix a base seed with context values (round, fold, ...) into a new seed.
pub fn derive_seed(base: u64, context: &[u64]) -> u64 {
    // splitmix64 finalizer applied after each absorbed word.
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    context
        .iter()
        .fold(mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15)), |h, &c| {
            mix(h ^ c.wrapping_add(0x9e37_79b9_7f4a_7c15))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: LossKind,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "phase", "lr", "train_loss", "val_loss", "val_map"])
            .map_err(|e| Error::Format(e.to_string()))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.phase.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                opt(r.val_loss),
                opt(r.val_map),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    /// Last recorded validation mAP.
    pub fn final_val_map(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.val_map)
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub params: ModelParameters,
    /// Zero-based cosine cycle the snapshot closes.
    pub cycle: usize,
    pub epoch: usize,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub snapshots: Vec<Snapshot>,
    pub log: TrainingLog,
    /// Parameters after the last epoch.
    pub final_params: ModelParameters,
    pub manifest: RunManifest,
}

/// Written next to a run's checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: SegmentationModelSpec,
    pub spec_hash: String,
    pub config: TrainingConfig,
    pub seed: u64,
    pub round: Option<usize>,
    pub fold: Option<usize>,
    pub phase: String,
    pub init: InitSource,
    pub train_ids: usize,
    pub val_ids: usize,
    pub snapshots: Vec<String>,
}

/// Labels what a run is for; carried into checkpoint tags and manifests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunContext {
    pub round: Option<usize>,
    pub phase: String,
    /// Directory for the log, manifest and snapshots; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
}

impl RunContext {
    pub fn in_memory(phase: &str) -> Self {
        Self {
            round: None,
            phase: phase.to_string(),
            out_dir: None,
        }
    }
}

/// Train a freshly initialised model.
pub fn train_run(
    spec: &SegmentationModelSpec,
    split: &FoldSplit,
    geometry: &Geometry,
    config: &TrainingConfig,
    init_seed: u64,
    ctx: &RunContext,
) -> Result<RunOutput> {
    let model = SegmentationModel::<f32>::new(spec, init_seed)?;
    let init = match (&spec.pretrained, &spec.pretrained_weights) {
        (true, Some(path)) => InitSource::Pretrained {
            path: path.clone(),
            seed: init_seed,
        },
        _ => InitSource::Random { seed: init_seed },
    };
    run(model, split, geometry, config, init, ctx)
}

/// Continue training from `params` (same spec), e.g. ground-truth
/// fine-tuning after a pseudo-label phase.
pub fn finetune_run(
    spec: &SegmentationModelSpec,
    split: &FoldSplit,
    geometry: &Geometry,
    config: &TrainingConfig,
    params: &ModelParameters,
    from_phase: &str,
    ctx: &RunContext,
) -> Result<RunOutput> {
    if params.spec_hash != spec.spec_hash() {
        return Err(Error::Compatibility(format!(
            "parameters for spec {} cannot be fine-tuned as spec {}",
            params.spec_hash,
            spec.spec_hash()
        )));
    }
    let model = SegmentationModel::<f32>::from_parameters(params)?;
    let init = InitSource::Continuation {
        from: from_phase.to_string(),
        params_digest: params_digest(params)?,
    };
    run(model, split, geometry, config, init, ctx)
}

/// Preprocessed network inputs and targets for a list of samples.
pub(crate) fn batch_tensors(
    samples: &[&SeismicSample],
    geometry: &Geometry,
) -> Result<(Tensor<f32>, Option<Vec<f64>>)> {
    let size = geometry.padded;
    let mut x = Vec::with_capacity(samples.len() * size * size);
    let mut y = Vec::with_capacity(samples.len() * size * size);
    let mut all_masks = true;
    for s in samples {
        x.extend_from_slice(geometry.preprocess_image(&s.image)?.data());
        match &s.mask {
            Some(m) => y.extend(geometry.preprocess_mask(m)?.data().iter().map(|&v| v as f64)),
            None => all_masks = false,
        }
    }
    let x = Tensor::from_vec([samples.len(), 1, size, size], x);
    Ok((x, all_masks.then_some(y)))
}

/// Probability planes postprocessed to the source resolution.
pub(crate) fn logits_to_source_probs(logits: &Tensor<f32>, geometry: &Geometry) -> Result<Vec<Image>> {
    (0..logits.batch())
        .map(|i| {
            let probs: Vec<f32> = logits.item(i).iter().map(|&v| sigmoid(v)).collect();
            geometry.postprocess_plane(&probs)
        })
        .collect()
}

struct Validation {
    loss: f64,
    map: f64,
}

fn validate(
    model: &mut SegmentationModel<f32>,
    val: &Dataset,
    geometry: &Geometry,
    loss: LossKind,
    batch_size: usize,
) -> Result<Validation> {
    let samples: Vec<&SeismicSample> = val.samples().iter().collect();
    let plane = geometry.padded * geometry.padded;
    let mut total = 0.0;
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let (x, y) = batch_tensors(chunk, geometry)?;
        let y = y.expect("validation samples carry masks");
        let logits = model.forward(&x, Mode::Eval)?;
        let l: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        let (value, _) = loss.evaluate(&l, &y, plane)?;
        total += value * chunk.len() as f64;
        for p in logits_to_source_probs(&logits, geometry)? {
            predictions.push(binarize(&p, 0.5));
        }
    }
    let report = mean_ap(
        samples
            .iter()
            .zip(&predictions)
            .map(|(s, p)| (s.id.as_str(), s.mask.as_ref().expect("checked"), p)),
    )?;
    Ok(Validation {
        loss: total / samples.len() as f64,
        map: report.map_score,
    })
}

fn run(
    mut model: SegmentationModel<f32>,
    split: &FoldSplit,
    geometry: &Geometry,
    config: &TrainingConfig,
    init: InitSource,
    ctx: &RunContext,
) -> Result<RunOutput> {
    config.validate()?;
    split.check()?;
    let spec = model.spec().clone();
    if geometry.padded != spec.input_size {
        return Err(Error::Config(format!(
            "geometry pads to {} but the model takes {}",
            geometry.padded, spec.input_size
        )));
    }
    if let Some(dir) = &ctx.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let seed = derive_seed(
        config.seed,
        &[
            ctx.round.unwrap_or(0) as u64,
            split.fold.map_or(u64::MAX, |f| f as u64),
            ctx.phase.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64)),
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimizer = Optimizer::new(config);
    let plane = spec.input_size * spec.input_size;
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut log = TrainingLog::default();
    let mut snapshots = Vec::new();
    let tags = |epoch: usize, cycle: Option<usize>| ParamTags {
        round: ctx.round,
        fold: split.fold,
        snapshot: cycle,
        epoch: Some(epoch),
    };

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config)?;
        let loss = loss_for_epoch(epoch, config);
        if epoch > 0 && loss != loss_for_epoch(epoch - 1, config) {
            // Moment estimates fitted to the old loss's gradient scale would
            // turn the first steps on the new loss into huge jumps.
            optimizer = Optimizer::new(config);
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<SeismicSample> = chunk
                .iter()
                .map(|&i| augment(&split.train.samples()[i], &config.augment, &mut rng))
                .collect();
            let refs: Vec<&SeismicSample> = batch.iter().collect();
            let (x, y) = batch_tensors(&refs, geometry)?;
            let y = y.expect("checked");
            model.zero_grad();
            let logits = model.forward(&x, Mode::Train)?;
            let l: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
            let (value, grad) = loss.evaluate(&l, &y, plane)?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "{} loss became {value} at epoch {epoch}, batch {b} (lr {lr:.3e}); \
                     a longer BCE warm-up or a lower learning rate usually helps",
                    loss
                )));
            }
            let dlogits = Tensor::from_vec(logits.shape(), grad.iter().map(|&g| g as f32).collect());
            model.backward(&dlogits)?;
            optimizer.step(&mut model, lr);
            total += value * chunk.len() as f64;
        }
        let train_loss = total / split.train.len() as f64;
        if config.norm_recalibration > 0 {
            let take = config.norm_recalibration.min(order.len());
            let samples: Vec<&SeismicSample> = order[..take].iter().map(|&i| &split.train.samples()[i]).collect();
            let batches = samples
                .chunks(config.batch_size)
                .map(|c| batch_tensors(c, geometry).map(|(x, _)| x))
                .collect::<Result<Vec<_>>>()?;
            model.recalibrate_norms(batches)?;
        }
        let (val_loss, val_map) = match &split.val {
            Some(val) if !val.is_empty() => {
                let v = validate(&mut model, val, geometry, loss, config.batch_size)?;
                (Some(v.loss), Some(v.map))
            }
            _ => (None, None),
        };
        log.rows.push(LogRow {
            epoch,
            phase: loss,
            lr,
            train_loss,
            val_loss,
            val_map,
        });
        if epoch % config.cycle_len == config.cycle_len - 1 {
            let cycle = epoch / config.cycle_len;
            let params = model.parameters(tags(epoch, Some(cycle)));
            if !params.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite weights at snapshot {cycle} (epoch {epoch})"
                )));
            }
            let path = match &ctx.out_dir {
                Some(dir) => {
                    let p = dir.join(format!("snapshot_{cycle}.ckpt"));
                    params.save(&p)?;
                    Some(p)
                }
                None => None,
            };
            snapshots.push(Snapshot {
                params,
                cycle,
                epoch,
                path,
            });
        }
    }

    let final_params = model.parameters(tags(config.epochs.saturating_sub(1), None));
    let manifest = RunManifest {
        spec_hash: spec.spec_hash(),
        spec,
        config: config.clone(),
        seed,
        round: ctx.round,
        fold: split.fold,
        phase: ctx.phase.clone(),
        init,
        train_ids: split.train.len(),
        val_ids: split.val.as_ref().map_or(0, Dataset::len),
        snapshots: snapshots
            .iter()
            .filter_map(|s| s.path.as_ref())
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
    };
    if let Some(dir) = &ctx.out_dir {
        log.save(&dir.join("log.csv"))?;
        write_json(&dir.join("manifest.json"), &manifest)?;
    }
    Ok(RunOutput {
        snapshots,
        log,
        final_params,
        manifest,
    })
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests;
