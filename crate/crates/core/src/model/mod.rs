//! U-shaped segmentation network: residual encoder with scSE after every
//! stage, feature pyramid attention at the bottleneck, scSE decoder blocks
//! joined to the encoder by skip connections, and a hypercolumn head.

mod attention;
mod blocks;
mod checkpoint;
mod decoder;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use attention::{Fpa, Scse, FPA_MIN_SIZE};
pub use blocks::Stage;
pub use checkpoint::{file_digest, CheckpointHeader, ModelParameters, NamedArray, ParamTags};
pub use decoder::{DecoderBlock, HypercolumnHead};

use crate::nn::{HasParams, Param, ParamKind, Scalar, Tensor};
use crate::{Error, Result};

/// Encoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackboneId {
    #[serde(rename = "residual-34-style")]
    Residual34,
    #[serde(rename = "residual-grouped-50-style")]
    ResidualGrouped50,
    #[serde(rename = "tiny-test")]
    TinyTest,
}

const TINY_WIDTHS: [usize; 4] = [8, 16, 24, 32];

impl BackboneId {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneId::Residual34 => "residual-34-style",
            BackboneId::ResidualGrouped50 => "residual-grouped-50-style",
            BackboneId::TinyTest => "tiny-test",
        }
    }

    /// Output channels of each encoder stage.
    pub fn encoder_channels(&self) -> Vec<usize> {
        match self {
            BackboneId::Residual34 => vec![64, 64, 128, 256, 512],
            BackboneId::ResidualGrouped50 => vec![64, 256, 512, 1024, 2048],
            BackboneId::TinyTest => TINY_WIDTHS.to_vec(),
        }
    }

    /// Downsampling factor of each encoder stage's output.
    pub fn stage_strides(&self) -> Vec<usize> {
        match self {
            BackboneId::Residual34 | BackboneId::ResidualGrouped50 => vec![2, 4, 8, 16, 32],
            BackboneId::TinyTest => vec![1, 2, 4, 8],
        }
    }

    pub fn stages(&self) -> usize {
        self.encoder_channels().len()
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual-34-style" => Ok(BackboneId::Residual34),
            "residual-grouped-50-style" => Ok(BackboneId::ResidualGrouped50),
            "tiny-test" => Ok(BackboneId::TinyTest),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

/// Architecture configuration. Parameter names and shapes are a pure
/// function of this value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationModelSpec {
    pub backbone: BackboneId,
    #[serde(default)]
    pub pretrained: bool,
    /// Checkpoint holding `encoder.*` arrays; required when `pretrained`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_weights: Option<PathBuf>,
    pub scse_reduction: usize,
    pub decoder_channels: Vec<usize>,
    pub fpa_channels: usize,
    pub head_channels: usize,
    pub input_size: usize,
}

impl SegmentationModelSpec {
    fn full(backbone: BackboneId) -> Self {
        Self {
            backbone,
            pretrained: false,
            pretrained_weights: None,
            scse_reduction: 16,
            decoder_channels: vec![256, 128, 64, 48, 32],
            fpa_channels: 256,
            head_channels: 64,
            input_size: 256,
        }
    }

    pub fn residual34() -> Self {
        Self::full(BackboneId::Residual34)
    }

    pub fn residual_grouped50() -> Self {
        Self::full(BackboneId::ResidualGrouped50)
    }

    /// Four-stage CPU-scale model; `input_size` must be a multiple of 8
    /// and at least 64.
    pub fn tiny(input_size: usize) -> Self {
        Self {
            backbone: BackboneId::TinyTest,
            pretrained: false,
            pretrained_weights: None,
            scse_reduction: 4,
            decoder_channels: vec![24, 16, 12, 8],
            fpa_channels: 32,
            head_channels: 8,
            input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let enc = self.backbone.encoder_channels();
        let n = enc.len();
        if self.decoder_channels.len() != n {
            return Err(Error::Config(format!(
                "{} needs {n} decoder widths, got {}",
                self.backbone,
                self.decoder_channels.len()
            )));
        }
        if self.scse_reduction == 0 {
            return Err(Error::Config("scSE reduction must be positive".into()));
        }
        if let Some(c) = enc
            .iter()
            .chain(&self.decoder_channels)
            .find(|&&c| c == 0 || c % self.scse_reduction != 0)
        {
            return Err(Error::Config(format!(
                "{c} channels are not divisible by scSE reduction {}",
                self.scse_reduction
            )));
        }
        if self.fpa_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("FPA and head widths must be positive".into()));
        }
        let stride = *self.backbone.stage_strides().last().expect("non-empty");
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by {stride}",
                self.input_size
            )));
        }
        if self.input_size / stride < FPA_MIN_SIZE {
            return Err(Error::Config(format!(
                "bottleneck of {}x{0} is below the pyramid attention minimum of {FPA_MIN_SIZE}",
                self.input_size / stride
            )));
        }
        if self.pretrained && self.pretrained_weights.is_none() {
            return Err(Error::Config("pretrained backbone requested without a weight file".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 over the shape-determining fields.
    pub fn spec_hash(&self) -> String {
        let canonical = serde_json::json!({
            "backbone": self.backbone,
            "scse_reduction": self.scse_reduction,
            "decoder_channels": self.decoder_channels,
            "fpa_channels": self.fpa_channels,
            "head_channels": self.head_channels,
            "input_size": self.input_size,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

/// How a forward pass treats normalisation and caching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics, no caches.
    Eval,
    /// Running statistics with caches, for gradient checks.
    EvalWithGrad,
    /// Batch statistics that update the running averages, no caches.
    Calibrate,
}

impl Mode {
    fn train(self) -> bool {
        matches!(self, Mode::Train | Mode::Calibrate)
    }

    fn keep(self) -> bool {
        matches!(self, Mode::Train | Mode::EvalWithGrad)
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationModel<S> {
    spec: SegmentationModelSpec,
    encoder: Vec<Stage<S>>,
    encoder_scse: Vec<Scse<S>>,
    fpa: Fpa<S>,
    decoder: Vec<DecoderBlock<S>>,
    head: HypercolumnHead<S>,
    has_cache: bool,
}

impl<S: Scalar> SegmentationModel<S> {
    /// Random initialisation from `seed`; loads `encoder.*` arrays from the
    /// pretrained weight file when the spec asks for one.
    pub fn new(spec: &SegmentationModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = match spec.backbone {
            BackboneId::Residual34 => blocks::residual34(1, &mut rng),
            BackboneId::ResidualGrouped50 => blocks::residual_grouped50(1, &mut rng),
            BackboneId::TinyTest => blocks::tiny(1, &TINY_WIDTHS, &mut rng),
        };
        let enc_channels: Vec<usize> = encoder.iter().map(|s| s.out_channels).collect();
        let n = enc_channels.len();
        let encoder_scse = enc_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Scse::new(&format!("encoder_scse.{i}"), c, spec.scse_reduction, &mut rng))
            .collect();
        let fpa = Fpa::new("fpa", enc_channels[n - 1], spec.fpa_channels, &mut rng);
        let mut cin = spec.fpa_channels;
        let first_stride = spec.backbone.stage_strides()[0];
        let decoder = (0..n)
            .map(|j| {
                let skip = if j + 1 < n { enc_channels[n - 2 - j] } else { 0 };
                let upsample = j + 1 < n || first_stride > 1;
                let cout = spec.decoder_channels[j];
                let block = DecoderBlock::new(
                    &format!("decoder.{j}"),
                    cin,
                    skip,
                    cout,
                    spec.scse_reduction,
                    upsample,
                    &mut rng,
                );
                cin = cout;
                block
            })
            .collect();
        let head = HypercolumnHead::new("head", &spec.decoder_channels, spec.head_channels, spec.input_size, &mut rng);
        let mut model = Self {
            spec: spec.clone(),
            encoder,
            encoder_scse,
            fpa,
            decoder,
            head,
            has_cache: false,
        };
        if spec.pretrained {
            let path = spec.pretrained_weights.as_ref().expect("validated");
            let weights = ModelParameters::load(path)?;
            model.load_encoder(&weights)?;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &SegmentationModelSpec {
        &self.spec
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let [_, c, h, w] = x.shape();
        let size = self.spec.input_size;
        if c != 1 || h != size || w != size {
            return Err(Error::Shape(format!(
                "model expects N x 1 x {size} x {size} input, got {:?}",
                x.shape()
            )));
        }
        let (train, keep) = (mode.train(), mode.keep());
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut y = x.clone();
        for (stage, scse) in self.encoder.iter_mut().zip(&mut self.encoder_scse) {
            y = stage.forward(&y, train, keep);
            y = scse.forward(&y, keep);
            feats.push(y.clone());
        }
        let n = feats.len();
        let mut d = self.fpa.forward(&feats[n - 1], train, keep);
        let mut outs = Vec::with_capacity(n);
        for (j, block) in self.decoder.iter_mut().enumerate() {
            let skip = (j + 1 < n).then(|| &feats[n - 2 - j]);
            d = block.forward(&d, skip, train, keep);
            outs.push(d.clone());
        }
        let logits = self.head.forward(&outs.iter().collect::<Vec<_>>(), keep)?;
        self.has_cache = keep;
        Ok(logits)
    }

    /// Backpropagate `d loss / d logits` from the last cached forward pass,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, dlogits: &Tensor<S>) -> Result<()> {
        if !self.has_cache {
            return Err(Error::Validation("backward called without a cached forward pass".into()));
        }
        self.has_cache = false;
        let n = self.encoder.len();
        let mut dec_grads = self.head.backward(dlogits);
        let mut skip_grads: Vec<Option<Tensor<S>>> = vec![None; n];
        let mut carry: Option<Tensor<S>> = None;
        for j in (0..n).rev() {
            let mut g = std::mem::replace(&mut dec_grads[j], Tensor::zeros([0, 0, 0, 0]));
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            let (din, dskip) = self.decoder[j].backward(&g);
            if let Some(ds) = dskip {
                skip_grads[n - 2 - j] = Some(ds);
            }
            carry = Some(din);
        }
        let mut d = self.fpa.backward(&carry.expect("at least one decoder block"));
        for i in (0..n).rev() {
            if let Some(s) = skip_grads[i].take() {
                d.add_assign(&s);
            }
            d = self.encoder_scse[i].backward(&d);
            d = self.encoder[i].backward(&d);
        }
        Ok(())
    }

    /// Re-estimate every normalisation layer's running statistics from
    /// `batches` under the current weights, discarding the old estimates.
    ///
    /// The buffers restart from zero and follow the usual exponential
    /// update; dividing by the accumulated weight `1 - (1-m)^B` turns that
    /// into a normalised average over the `B` batches.
    pub fn recalibrate_norms(&mut self, batches: impl IntoIterator<Item = Tensor<S>>) -> Result<()> {
        let mut saved = Vec::new();
        self.visit_mut(&mut |p| {
            if p.kind == ParamKind::Buffer {
                let zeros = vec![S::zero(); p.value.len()];
                saved.push(std::mem::replace(&mut p.value, zeros));
            }
        });
        let mut count = 0;
        for x in batches {
            self.forward(&x, Mode::Calibrate)?;
            count += 1;
        }
        if count == 0 {
            let mut saved = saved.into_iter();
            self.visit_mut(&mut |p| {
                if p.kind == ParamKind::Buffer {
                    p.value = saved.next().expect("one saved buffer per buffer");
                }
            });
            return Ok(());
        }
        let weight = S::lit(1.0 - (1.0 - crate::nn::BatchNorm2d::<S>::MOMENTUM).powi(count));
        self.visit_mut(&mut |p| {
            if p.kind == ParamKind::Buffer {
                p.value.iter_mut().for_each(|v| *v /= weight);
            }
        });
        Ok(())
    }

    pub fn head(&self) -> &HypercolumnHead<S> {
        &self.head
    }

    /// Snapshot of every weight and buffer as `f32`.
    pub fn parameters(&self, tags: ParamTags) -> ModelParameters {
        let mut arrays = Vec::new();
        self.visit(&mut |p| {
            arrays.push(NamedArray {
                name: p.name.clone(),
                shape: p.shape.clone(),
                kind: p.kind,
                data: p.value.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            })
        });
        ModelParameters {
            spec: self.spec.clone(),
            spec_hash: self.spec.spec_hash(),
            tags,
            arrays,
        }
    }

    /// Overwrite every weight and buffer; names, shapes and the spec hash
    /// must all match.
    pub fn load_parameters(&mut self, params: &ModelParameters) -> Result<()> {
        let expected = self.spec.spec_hash();
        if params.spec_hash != expected {
            return Err(Error::Compatibility(format!(
                "parameters were built for spec {} but the model has spec {expected}",
                params.spec_hash
            )));
        }
        let mut idx = 0;
        let mut err = None;
        self.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match params.arrays.get(idx) {
                Some(a) if a.name == p.name && a.shape == p.shape => {
                    p.value = a.data.iter().map(|&v| S::lit(v as f64)).collect();
                }
                Some(a) => {
                    err = Some(Error::Compatibility(format!(
                        "array {idx} is `{}` {:?}, model expects `{}` {:?}",
                        a.name, a.shape, p.name, p.shape
                    )))
                }
                None => err = Some(Error::Compatibility(format!("missing array `{}`", p.name))),
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != params.arrays.len() {
            return Err(Error::Compatibility(format!(
                "parameters hold {} arrays, model has {idx}",
                params.arrays.len()
            )));
        }
        Ok(())
    }

    /// Build a model with the stored spec and load the stored values.
    pub fn from_parameters(params: &ModelParameters) -> Result<Self> {
        let mut spec = params.spec.clone();
        spec.pretrained = false;
        spec.pretrained_weights = None;
        let mut model = Self::new(&spec, 0)?;
        model.spec = params.spec.clone();
        model.load_parameters(params)?;
        Ok(model)
    }

    fn load_encoder(&mut self, weights: &ModelParameters) -> Result<()> {
        let mut loaded = 0;
        let mut mismatch = None;
        for stage in &mut self.encoder {
            stage.visit_mut(&mut |p| {
                if let Some(a) = weights.arrays.iter().find(|a| a.name == p.name) {
                    if a.shape == p.shape {
                        p.value = a.data.iter().map(|&v| S::lit(v as f64)).collect();
                        loaded += 1;
                    } else {
                        mismatch = Some(p.name.clone());
                    }
                }
            });
        }
        if let Some(name) = mismatch {
            return Err(Error::Compatibility(format!("pretrained array `{name}` has the wrong shape")));
        }
        if loaded == 0 {
            return Err(Error::Compatibility("pretrained weight file holds no encoder arrays".into()));
        }
        Ok(())
    }
}

impl<S: Scalar> HasParams<S> for SegmentationModel<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        for (stage, scse) in self.encoder.iter().zip(&self.encoder_scse) {
            stage.visit(f);
            scse.visit(f);
        }
        self.fpa.visit(f);
        for d in &self.decoder {
            d.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for (stage, scse) in self.encoder.iter_mut().zip(&mut self.encoder_scse) {
            stage.visit_mut(f);
            scse.visit_mut(f);
        }
        self.fpa.visit_mut(f);
        for d in &mut self.decoder {
            d.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Apply a freshly initialised scSE block to `f`.
pub fn scse_block<S: Scalar>(f: &Tensor<S>, reduction: usize, seed: u64) -> Result<Tensor<S>> {
    if reduction == 0 || f.channels() % reduction != 0 {
        return Err(Error::Config(format!(
            "{} channels are not divisible by reduction {reduction}",
            f.channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Scse::new("scse", f.channels(), reduction, &mut rng).forward(f, false))
}

/// Apply a freshly initialised pyramid attention block (eval mode) to `f`.
pub fn fpa_block<S: Scalar>(f: &Tensor<S>, out_channels: usize, seed: u64) -> Result<Tensor<S>> {
    check_fpa_input(f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Fpa::new("fpa", f.channels(), out_channels, &mut rng).forward(f, false, false))
}

pub(crate) fn check_fpa_input<S: Scalar>(f: &Tensor<S>) -> Result<()> {
    let (h, w) = (f.height(), f.width());
    if h < FPA_MIN_SIZE || w < FPA_MIN_SIZE || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Config(format!(
            "pyramid attention needs a spatial size of at least {FPA_MIN_SIZE} divisible by 8, got {h}x{w}"
        )));
    }
    Ok(())
}
