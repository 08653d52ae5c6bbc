//! Flip test-time augmentation, ensemble averaging over checkpoints,
//! binarization, evaluation, submission files, ensemble selectors and
//! checkpoint inventories.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{read_label_csv, write_label_csv, Dataset, Geometry, Image, Mask, SeismicSample};
use crate::metrics::{mean_ap, EvaluationReport};
use crate::model::{Mode, ModelParameters, SegmentationModel};
use crate::nn::{sigmoid, Tensor};
use crate::trainer::{batch_tensors, params_digest};
use crate::{parallel, Error, Result};

/// Probability cut for the most probable class; a pixel is salt iff `p > 0.5`.
pub const BINARIZE_THRESHOLD: f32 = 0.5;

/// Space in which member predictions are averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageSpace {
    #[default]
    Probability,
    Logit,
}

impl AverageSpace {
    fn as_str(&self) -> &'static str {
        match self {
            AverageSpace::Probability => "prob",
            AverageSpace::Logit => "logit",
        }
    }
}

/// `1` where `p > threshold`.
pub fn binarize(probs: &Image, threshold: f32) -> Mask {
    let data = probs.data().iter().map(|&p| u8::from(p > threshold)).collect();
    Mask::from_vec(probs.height(), probs.width(), data).expect("binary by construction")
}

/// Network output for a preprocessed batch in the requested space, averaged
/// with the unflipped prediction of the flipped batch when `tta` is set.
fn member_output(model: &mut SegmentationModel<f32>, x: &Tensor<f32>, tta: bool, space: AverageSpace) -> Result<Tensor<f32>> {
    let to_space = |t: Tensor<f32>| match space {
        AverageSpace::Probability => t.map(sigmoid),
        AverageSpace::Logit => t,
    };
    let mut out = to_space(model.forward(x, Mode::Eval)?);
    if tta {
        let flipped = to_space(model.forward(&x.flip_horizontal(), Mode::Eval)?.flip_horizontal());
        out.data_mut().iter_mut().zip(flipped.data()).for_each(|(a, &b)| *a = 0.5 * (*a + b));
    }
    Ok(out)
}

/// Probabilities of the original and horizontally flipped batch, averaged.
pub fn tta_predict(model: &mut SegmentationModel<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    member_output(model, x, true, AverageSpace::Probability)
}

/// Plain per-pixel probabilities.
pub fn predict(model: &mut SegmentationModel<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    member_output(model, x, false, AverageSpace::Probability)
}

/// Where a member sits in the experiment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemberTag {
    pub arch: String,
    pub round: Option<usize>,
    pub fold: Option<usize>,
    pub snapshot: Option<usize>,
}

impl MemberTag {
    fn of(params: &ModelParameters) -> Self {
        Self {
            arch: params.spec.backbone.as_str().to_string(),
            round: params.tags.round,
            fold: params.tags.fold,
            snapshot: params.tags.snapshot,
        }
    }
}

impl fmt::Display for MemberTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        write!(
            f,
            "arch={} round={} fold={} snapshot={}",
            self.arch,
            opt(self.round),
            opt(self.fold),
            opt(self.snapshot)
        )
    }
}

/// One checkpoint taking part in an ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub tag: MemberTag,
    /// Checkpoint path, or a description for in-memory parameters.
    pub source: String,
    pub params: ModelParameters,
}

impl EnsembleMember {
    pub fn from_params(params: ModelParameters, source: impl Into<String>) -> Self {
        Self {
            tag: MemberTag::of(&params),
            source: source.into(),
            params,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_params(ModelParameters::load(path)?, path.display().to_string()))
    }
}

/// Members plus how to combine them.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
    pub tta: bool,
    pub average: AverageSpace,
}

impl EnsembleSpec {
    pub fn new(members: Vec<EnsembleMember>, tta: bool) -> Result<Self> {
        let spec = Self {
            members,
            tta,
            average: AverageSpace::Probability,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_average(mut self, average: AverageSpace) -> Self {
        self.average = average;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
        let size = first.params.spec.input_size;
        for m in &self.members {
            if m.params.spec.input_size != size {
                return Err(Error::Compatibility(format!(
                    "ensemble member {} ({}) takes {}x{} inputs, the first member takes {size}x{size}",
                    m.source, m.tag, m.params.spec.input_size, m.params.spec.input_size
                )));
            }
        }
        Ok(())
    }
}

/// Per-member outputs on disk, keyed by checkpoint digest and image id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionCache {
    dir: PathBuf,
}

impl PredictionCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, digest: &str, id: &str, tta: bool, space: AverageSpace) -> PathBuf {
        let variant = format!("{}-{}", if tta { "tta" } else { "plain" }, space.as_str());
        self.dir.join(digest).join(format!("{id}.{variant}.f32"))
    }

    fn get(&self, path: &Path, len: usize) -> Option<Vec<f32>> {
        let bytes = fs::read(path).ok()?;
        (bytes.len() == 4 * len).then(|| {
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        })
    }

    fn put(&self, path: &Path, values: &[f32]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Instantiated ensemble ready to predict.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// Sorted by parameter digest so the reduction order is fixed no matter
    /// how members were listed.
    models: Vec<(String, SegmentationModel<f32>)>,
    tta: bool,
    average: AverageSpace,
    input_size: usize,
    batch_size: usize,
    cache: Option<PredictionCache>,
}

impl Ensemble {
    pub fn new(spec: &EnsembleSpec) -> Result<Self> {
        spec.validate()?;
        let mut models = spec
            .members
            .iter()
            .map(|m| Ok((params_digest(&m.params)?, SegmentationModel::from_parameters(&m.params)?)))
            .collect::<Result<Vec<_>>>()?;
        models.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            models,
            tta: spec.tta,
            average: spec.average,
            input_size: spec.members[0].params.spec.input_size,
            batch_size: 16,
            cache: None,
        })
    }

    pub fn with_cache(mut self, cache: PredictionCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Mean member output at network resolution, one plane per sample.
    fn accumulate(&mut self, samples: &[&SeismicSample], geometry: &Geometry) -> Result<Vec<Vec<f64>>> {
        if geometry.padded != self.input_size {
            return Err(Error::Compatibility(format!(
                "geometry pads to {}x{} but the ensemble takes {}x{} inputs",
                geometry.padded, geometry.padded, self.input_size, self.input_size
            )));
        }
        let plane = geometry.padded * geometry.padded;
        let mut sums = vec![vec![0.0f64; plane]; samples.len()];
        let (tta, space) = (self.tta, self.average);
        for (digest, model) in &mut self.models {
            let mut outputs: Vec<Option<Vec<f32>>> = match &self.cache {
                Some(c) => samples
                    .iter()
                    .map(|s| c.get(&c.path(digest, &s.id, tta, space), plane))
                    .collect(),
                None => vec![None; samples.len()],
            };
            let missing: Vec<usize> = (0..samples.len()).filter(|&i| outputs[i].is_none()).collect();
            for chunk in missing.chunks(self.batch_size) {
                let batch: Vec<&SeismicSample> = chunk.iter().map(|&i| samples[i]).collect();
                let (x, _) = batch_tensors(&batch, geometry)?;
                let out = member_output(model, &x, tta, space)?;
                for (k, &i) in chunk.iter().enumerate() {
                    let values = out.item(k).to_vec();
                    if let Some(c) = &self.cache {
                        c.put(&c.path(digest, &samples[i].id, tta, space), &values)?;
                    }
                    outputs[i] = Some(values);
                }
            }
            for (sum, out) in sums.iter_mut().zip(outputs) {
                for (a, &v) in sum.iter_mut().zip(&out.expect("filled above")) {
                    *a += v as f64;
                }
            }
        }
        Ok(sums)
    }

    /// Ensemble probabilities at the source resolution.
    pub fn predict(&mut self, samples: &[&SeismicSample], geometry: &Geometry) -> Result<Vec<Image>> {
        let n = self.models.len() as f64;
        let space = self.average;
        self.accumulate(samples, geometry)?
            .into_iter()
            .map(|sum| {
                let plane: Vec<f32> = sum
                    .into_iter()
                    .map(|v| {
                        let mean = (v / n) as f32;
                        match space {
                            AverageSpace::Probability => mean,
                            AverageSpace::Logit => sigmoid(mean),
                        }
                    })
                    .collect();
                geometry.postprocess_plane(&plane)
            })
            .collect()
    }

    /// `predict` over a whole dataset, split across `workers` threads.
    pub fn predict_dataset(&self, dataset: &Dataset, geometry: &Geometry, workers: usize) -> Result<Vec<Image>> {
        let samples: Vec<&SeismicSample> = dataset.samples().iter().collect();
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let workers = workers.clamp(1, samples.len());
        let per = samples.len().div_ceil(workers);
        let chunks: Vec<&[&SeismicSample]> = samples.chunks(per).collect();
        let parts = parallel::map(&chunks, workers, |_, chunk| self.clone().predict(chunk, geometry));
        let mut out = Vec::with_capacity(samples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Binary masks keyed by sample id.
    pub fn predict_masks(&self, dataset: &Dataset, geometry: &Geometry, workers: usize) -> Result<BTreeMap<String, Mask>> {
        let probs = self.predict_dataset(dataset, geometry, workers)?;
        Ok(dataset
            .samples()
            .iter()
            .zip(&probs)
            .map(|(s, p)| (s.id.clone(), binarize(p, BINARIZE_THRESHOLD)))
            .collect())
    }
}

/// Predict, binarize and score a labeled holdout.
pub fn evaluate(ensemble: &Ensemble, holdout: &Dataset, geometry: &Geometry, workers: usize) -> Result<EvaluationReport> {
    if let Some(s) = holdout.samples().iter().find(|s| s.mask.is_none()) {
        return Err(Error::Validation(format!("holdout sample `{}` has no mask", s.id)));
    }
    let predicted = ensemble.predict_masks(holdout, geometry, workers)?;
    mean_ap(
        holdout
            .samples()
            .iter()
            .map(|s| (s.id.as_str(), s.mask.as_ref().expect("checked"), &predicted[&s.id])),
    )
}

/// Write `id,rle_mask` rows sorted by id; every mask must be `size x size`.
pub fn write_submission(predictions: &BTreeMap<String, Mask>, size: usize, path: &Path) -> Result<()> {
    for (id, m) in predictions {
        if m.height() != size || m.width() != size {
            return Err(Error::Validation(format!(
                "submission mask `{id}` is {}x{}, expected {size}x{size}",
                m.height(),
                m.width()
            )));
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_label_csv(path, predictions.iter().map(|(id, m)| (id.as_str(), m)))
}

pub fn read_submission(path: &Path, size: usize) -> Result<BTreeMap<String, Mask>> {
    read_label_csv(path, size, size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Field {
    Round,
    Fold,
    Snapshot,
    Arch,
}

impl Field {
    fn parse(word: &str) -> Option<Self> {
        Some(match word {
            "round" | "rounds" => Field::Round,
            "fold" | "folds" => Field::Fold,
            "snapshot" | "snapshots" => Field::Snapshot,
            "arch" | "archs" => Field::Arch,
            _ => return None,
        })
    }

    fn numeric(&self) -> bool {
        *self != Field::Arch
    }
}

/// Ensemble selector such as `rounds in {2,3}, folds=*, snapshots=*, arch=*`.
///
/// Fields not mentioned match anything. Rounds count from 1; folds and
/// snapshots from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selector {
    clauses: BTreeMap<Field, Option<BTreeSet<String>>>,
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            position: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.text[self.pos..].starts_with(char::is_whitespace) {
            self.pos += self.text[self.pos..].chars().next().map_or(1, char::len_utf8);
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.text[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn word(&mut self) -> Option<(usize, &'a str)> {
        self.skip_ws();
        let start = self.pos;
        let len = self.text[start..]
            .find(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')))
            .unwrap_or(self.text.len() - start);
        self.pos += len;
        (len > 0).then(|| (start, &self.text[start..start + len]))
    }

    fn value(&mut self, field: Field) -> Result<String> {
        match self.word() {
            Some((at, w)) => {
                if field.numeric() && w.parse::<usize>().is_err() {
                    return Err(Error::Parse {
                        position: at,
                        message: format!("expected a non-negative integer, found `{w}`"),
                    });
                }
                Ok(w.to_string())
            }
            None => self.err("expected a value"),
        }
    }
}

impl Selector {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cur = Cursor { text, pos: 0 };
        let mut clauses = BTreeMap::new();
        loop {
            let (at, word) = match cur.word() {
                Some(w) => w,
                None => return cur.err("expected a field name (round, fold, snapshot or arch)"),
            };
            let field = match Field::parse(word) {
                Some(f) => f,
                None => {
                    return Err(Error::Parse {
                        position: at,
                        message: format!("unknown field `{word}`"),
                    })
                }
            };
            let values = if cur.eat('=') {
                if cur.eat('*') {
                    None
                } else {
                    Some(BTreeSet::from([cur.value(field)?]))
                }
            } else {
                cur.skip_ws();
                let at = cur.pos;
                if !matches!(cur.word(), Some((_, "in"))) {
                    return Err(Error::Parse {
                        position: at,
                        message: "expected `=` or `in`".into(),
                    });
                }
                if !cur.eat('{') {
                    return cur.err("expected `{`");
                }
                let mut set = BTreeSet::new();
                loop {
                    set.insert(cur.value(field)?);
                    if cur.eat('}') {
                        break;
                    }
                    if !cur.eat(',') {
                        return cur.err("expected `,` or `}`");
                    }
                }
                Some(set)
            };
            if clauses.insert(field, values).is_some() {
                return Err(Error::Parse {
                    position: at,
                    message: format!("field `{word}` given twice"),
                });
            }
            if cur.peek().is_none() {
                break;
            }
            if !cur.eat(',') {
                return cur.err("expected `,` between clauses");
            }
        }
        Ok(Self { clauses })
    }

    pub fn matches(&self, tag: &MemberTag) -> bool {
        self.clauses.iter().all(|(field, values)| {
            let Some(values) = values else { return true };
            let actual = match field {
                Field::Round => tag.round.map(|v| v.to_string()),
                Field::Fold => tag.fold.map(|v| v.to_string()),
                Field::Snapshot => tag.snapshot.map(|v| v.to_string()),
                Field::Arch => Some(tag.arch.clone()),
            };
            actual.is_some_and(|a| {
                values.contains(&a) || (field.numeric() && values.iter().any(|v| v.parse::<usize>().ok() == a.parse().ok()))
            })
        })
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// A checkpoint file found on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InventoryEntry {
    pub path: PathBuf,
    pub tag: MemberTag,
    pub spec_hash: String,
}

/// Every `*.ckpt` below `root`, read header-only, sorted by path.
pub fn checkpoint_inventory(root: &Path) -> Result<Vec<InventoryEntry>> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "ckpt") {
                files.push(path);
            }
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|path| {
            let h = ModelParameters::read_header(&path)?;
            Ok(InventoryEntry {
                tag: MemberTag {
                    arch: h.spec.backbone.as_str().to_string(),
                    round: h.tags.round,
                    fold: h.tags.fold,
                    snapshot: h.tags.snapshot,
                },
                spec_hash: h.spec_hash,
                path,
            })
        })
        .collect()
}

/// Entries matching `selector`; an empty selection is a configuration error.
pub fn select<'a>(inventory: &'a [InventoryEntry], selector: &Selector) -> Result<Vec<&'a InventoryEntry>> {
    let chosen: Vec<&InventoryEntry> = inventory.iter().filter(|e| selector.matches(&e.tag)).collect();
    if chosen.is_empty() {
        return Err(Error::Config(format!(
            "the selector matches none of the {} checkpoints found",
            inventory.len()
        )));
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests;
