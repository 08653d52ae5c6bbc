use rand::Rng;

use super::attention::Scse;
use crate::nn::{
    join, resize_bilinear, resize_bilinear_backward, upsample_nearest, upsample_nearest_backward, Conv2d, ConvBnRelu,
    ConvOpts, HasParams, Param, Relu, Scalar, Tensor,
};
use crate::{Error, Result};

/// Upsample x2 (nearest), concatenate the skip, two 3x3 conv-BN-ReLU, scSE.
/// A block without a skip may run at its input resolution instead.
#[derive(Debug, Clone)]
pub struct DecoderBlock<S> {
    upsample: bool,
    in_channels: usize,
    skip_channels: usize,
    c1: ConvBnRelu<S>,
    c2: ConvBnRelu<S>,
    scse: Scse<S>,
}

impl<S: Scalar> DecoderBlock<S> {
    pub fn new(
        name: &str,
        in_channels: usize,
        skip_channels: usize,
        out_channels: usize,
        reduction: usize,
        upsample: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            upsample,
            in_channels,
            skip_channels,
            c1: ConvBnRelu::new(&join(name, "1"), in_channels + skip_channels, out_channels, 3, ConvOpts::same(3), rng),
            c2: ConvBnRelu::new(&join(name, "2"), out_channels, out_channels, 3, ConvOpts::same(3), rng),
            scse: Scse::new(&join(name, "scse"), out_channels, reduction, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, skip: Option<&Tensor<S>>, train: bool, keep: bool) -> Tensor<S> {
        let up = if self.upsample { upsample_nearest(x, 2) } else { x.clone() };
        let cat = match skip {
            Some(s) => Tensor::concat_channels(&[&up, s]),
            None => up,
        };
        let y = self.c1.forward(&cat, train, keep);
        let y = self.c2.forward(&y, train, keep);
        self.scse.forward(&y, keep)
    }

    /// Returns gradients for the block input and (if present) the skip.
    pub fn backward(&mut self, dy: &Tensor<S>) -> (Tensor<S>, Option<Tensor<S>>) {
        let d = self.scse.backward(dy);
        let d = self.c2.backward(&d);
        let dcat = self.c1.backward(&d);
        let (dup, dskip) = if self.skip_channels == 0 {
            (dcat, None)
        } else {
            let mut parts = dcat.split_channels(&[self.in_channels, self.skip_channels]);
            let dskip = parts.pop();
            (parts.pop().expect("two parts"), dskip)
        };
        let dx = if self.upsample { upsample_nearest_backward(&dup, 2) } else { dup };
        (dx, dskip)
    }
}

impl<S: Scalar> HasParams<S> for DecoderBlock<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.c1.visit(f);
        self.c2.visit(f);
        self.scse.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
        self.scse.visit_mut(f);
    }
}

/// Upsamples every decoder output to full resolution, stacks them into
/// hypercolumns and predicts one logit per pixel (3x3 conv, ReLU, 1x1 conv).
#[derive(Debug, Clone)]
pub struct HypercolumnHead<S> {
    channels: Vec<usize>,
    size: usize,
    conv: Conv2d<S>,
    relu: Relu<S>,
    out: Conv2d<S>,
    shapes: Option<Vec<[usize; 4]>>,
}

impl<S: Scalar> HypercolumnHead<S> {
    pub fn new(name: &str, channels: &[usize], hidden: usize, size: usize, rng: &mut impl Rng) -> Self {
        let total = channels.iter().sum();
        Self {
            channels: channels.to_vec(),
            size,
            conv: Conv2d::new(&join(name, "conv"), total, hidden, 3, ConvOpts::same(3).with_bias(), rng),
            relu: Relu::new(),
            out: Conv2d::new(&join(name, "out"), hidden, 1, 1, ConvOpts::same(1).with_bias(), rng),
            shapes: None,
        }
    }

    /// Channel count of the stacked hypercolumn.
    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn forward(&mut self, outputs: &[&Tensor<S>], keep: bool) -> Result<Tensor<S>> {
        if outputs.len() != self.channels.len() {
            return Err(Error::Config(format!(
                "hypercolumn head expects {} decoder outputs, got {}",
                self.channels.len(),
                outputs.len()
            )));
        }
        let got: Vec<usize> = outputs.iter().map(|t| t.channels()).collect();
        if got != self.channels {
            return Err(Error::Config(format!(
                "hypercolumn head expects decoder channels {:?}, got {:?}",
                self.channels, got
            )));
        }
        let batch = outputs[0].batch();
        if outputs.iter().any(|t| t.batch() != batch) {
            return Err(Error::Shape("decoder outputs disagree on batch size".into()));
        }
        let ups: Vec<Tensor<S>> = outputs
            .iter()
            .map(|t| {
                if t.height() == self.size && t.width() == self.size {
                    (*t).clone()
                } else {
                    resize_bilinear(t, self.size, self.size)
                }
            })
            .collect();
        let cat = Tensor::concat_channels(&ups.iter().collect::<Vec<_>>());
        let h = self.conv.forward(&cat, keep);
        let h = self.relu.forward(&h, keep);
        let logits = self.out.forward(&h, keep);
        self.shapes = keep.then(|| outputs.iter().map(|t| t.shape()).collect());
        Ok(logits)
    }

    /// Gradients for each decoder output, in input order.
    pub fn backward(&mut self, dlogits: &Tensor<S>) -> Vec<Tensor<S>> {
        let shapes = self.shapes.take().expect("head backward without cached forward");
        let d = self.out.backward(dlogits);
        let d = self.relu.backward(&d);
        let dcat = self.conv.backward(&d);
        dcat.split_channels(&self.channels)
            .into_iter()
            .zip(shapes)
            .map(|(g, [_, _, h, w])| {
                if h == self.size && w == self.size {
                    g
                } else {
                    resize_bilinear_backward(&g, h, w)
                }
            })
            .collect()
    }
}

impl<S: Scalar> HasParams<S> for HypercolumnHead<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.conv.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.conv.visit_mut(f);
        self.out.visit_mut(f);
    }
}
