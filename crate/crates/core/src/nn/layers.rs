use rand::Rng;

use super::param::{join, HasParams, Param, ParamKind};
use super::{Scalar, Tensor};

/// Output columns `lo..hi` whose tap `kj` lands inside a row of width `w`.
#[inline]
fn valid_range(ow: usize, w: usize, kj: usize, s: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kj { (pad - kj).div_ceil(s) } else { 0 };
    let hi = if w + pad > kj { (w + pad - kj).div_ceil(s).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Output extent of a strided window.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// 2-D convolution (cross-correlation) with optional channel groups.
#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    input: Option<Tensor<S>>,
    // Column buffers reused across calls; contents never outlive a call.
    cols: Vec<S>,
    dcols: Vec<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvOpts {
    /// Stride 1, "same" padding, no bias.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: ConvOpts,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(in_channels % opts.groups == 0 && out_channels % opts.groups == 0);
        let cin_g = in_channels / opts.groups;
        let fan_in = cin_g * kernel * kernel;
        let weight = Param::he_normal(
            join(name, "weight"),
            &[out_channels, cin_g, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = opts
            .bias
            .then(|| Param::filled(join(name, "bias"), &[out_channels], ParamKind::Trainable, S::zero()));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride: opts.stride,
            pad: opts.pad,
            groups: opts.groups,
            input: None,
            cols: Vec::new(),
            dcols: Vec::new(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfold group `g` of one input item into a `(cin_g*k*k) x (oh*ow)` matrix.
    fn im2col(&self, item: &[S], h: usize, w: usize, g: usize, cols: &mut [S]) {
        let (k, s, pad) = (self.kernel, self.stride, self.pad);
        let oh = out_extent(h, k, s, pad);
        let ow = out_extent(w, k, s, pad);
        let cin_g = self.in_channels / self.groups;
        let plane = h * w;
        let mut row = 0;
        for c in 0..cin_g {
            let src = &item[(g * cin_g + c) * plane..(g * cin_g + c + 1) * plane];
            for ki in 0..k {
                let (ylo, yhi) = valid_range(oh, h, ki, s, pad);
                for kj in 0..k {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    let (lo, hi) = valid_range(ow, w, kj, s, pad);
                    dst[..ylo * ow].fill(S::zero());
                    dst[yhi * ow..].fill(S::zero());
                    for oy in ylo..yhi {
                        let iy = oy * s + ki - pad;
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        drow[..lo].fill(S::zero());
                        drow[hi..].fill(S::zero());
                        if lo == hi {
                            continue;
                        }
                        let start = iy * w + lo * s + kj - pad;
                        if s == 1 {
                            drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (d, &v) in drow[lo..hi].iter_mut().zip(src[start..].iter().step_by(s)) {
                                *d = v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Fold a column matrix back, accumulating into group `g` of `item`.
    fn col2im(&self, cols: &[S], h: usize, w: usize, g: usize, item: &mut [S]) {
        let (k, s, pad) = (self.kernel, self.stride, self.pad);
        let oh = out_extent(h, k, s, pad);
        let ow = out_extent(w, k, s, pad);
        let cin_g = self.in_channels / self.groups;
        let plane = h * w;
        let mut row = 0;
        for c in 0..cin_g {
            let dst = &mut item[(g * cin_g + c) * plane..(g * cin_g + c + 1) * plane];
            for ki in 0..k {
                let (ylo, yhi) = valid_range(oh, h, ki, s, pad);
                for kj in 0..k {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    let (lo, hi) = valid_range(ow, w, kj, s, pad);
                    row += 1;
                    if lo == hi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * s + ki - pad;
                        let start = iy * w + lo * s + kj - pad;
                        let srow = &src[oy * ow + lo..oy * ow + hi];
                        if s == 1 {
                            for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(srow) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst[start..].iter_mut().step_by(s).zip(srow) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, keep: bool) -> Tensor<S> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv {} input channels", self.weight.name);
        let oh = out_extent(h, self.kernel, self.stride, self.pad);
        let ow = out_extent(w, self.kernel, self.stride, self.pad);
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let kdim = cin_g * self.kernel * self.kernel;
        let p = oh * ow;
        let mut cols = std::mem::take(&mut self.cols);
        if !self.is_pointwise() {
            cols.resize(kdim * p, S::zero());
        }
        for b in 0..n {
            let item = x.item(b);
            let dst = out.item_mut(b);
            for g in 0..self.groups {
                let wg = &self.weight.value[g * cout_g * kdim..(g + 1) * cout_g * kdim];
                let yg = &mut dst[g * cout_g * p..(g + 1) * cout_g * p];
                if self.is_pointwise() {
                    let xg = &item[g * cin_g * p..(g + 1) * cin_g * p];
                    S::gemm(cout_g, kdim, p, wg, false, xg, false, yg, S::zero());
                } else {
                    self.im2col(item, h, w, g, &mut cols);
                    S::gemm(cout_g, kdim, p, wg, false, &cols, false, yg, S::zero());
                }
            }
            if let Some(bias) = &self.bias {
                for (co, plane) in dst.chunks_mut(p).enumerate() {
                    let bv = bias.value[co];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.cols = cols;
        self.input = keep.then(|| x.clone());
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let x = self.input.take().expect("conv backward without cached forward");
        let [n, _, h, w] = x.shape();
        let [_, _, oh, ow] = dy.shape();
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let kdim = cin_g * self.kernel * self.kernel;
        let p = oh * ow;
        let mut dx = Tensor::zeros(x.shape());
        let pointwise = self.is_pointwise();
        let mut cols = std::mem::take(&mut self.cols);
        let mut dcols = std::mem::take(&mut self.dcols);
        if !pointwise {
            cols.resize(kdim * p, S::zero());
            dcols.resize(kdim * p, S::zero());
        }
        for b in 0..n {
            let item = x.item(b);
            let dyb = dy.item(b);
            for g in 0..self.groups {
                let dyg = &dyb[g * cout_g * p..(g + 1) * cout_g * p];
                if !pointwise {
                    self.im2col(item, h, w, g, &mut cols);
                }
                let wg = &self.weight.value[g * cout_g * kdim..(g + 1) * cout_g * kdim];
                let dwg = &mut self.weight.grad[g * cout_g * kdim..(g + 1) * cout_g * kdim];
                if pointwise {
                    let xg = &item[g * cin_g * p..(g + 1) * cin_g * p];
                    S::gemm(cout_g, p, kdim, dyg, false, xg, true, dwg, S::one());
                    let dxg = &mut dx.item_mut(b)[g * cin_g * p..(g + 1) * cin_g * p];
                    S::gemm(kdim, cout_g, p, wg, true, dyg, false, dxg, S::one());
                } else {
                    S::gemm(cout_g, p, kdim, dyg, false, &cols, true, dwg, S::one());
                    S::gemm(kdim, cout_g, p, wg, true, dyg, false, &mut dcols, S::zero());
                    self.col2im(&dcols, h, w, g, dx.item_mut(b));
                }
            }
            if let Some(bias) = &mut self.bias {
                for (co, plane) in dyb.chunks(p).enumerate() {
                    let mut acc = S::zero();
                    plane.iter().for_each(|&v| acc += v);
                    bias.grad[co] += acc;
                }
            }
        }
        self.cols = cols;
        self.dcols = dcols;
        dx
    }
}

impl<S: Scalar> HasParams<S> for Conv2d<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Batch normalisation over (N, H, W) per channel. Uses running statistics
/// in evaluation mode so that outputs never depend on batch composition.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Param<S>,
    pub running_var: Param<S>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<S>>,
}

#[derive(Debug, Clone)]
struct BnCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
    train: bool,
}

impl<S: Scalar> BatchNorm2d<S> {
    /// Weight of the newest batch in the running statistics.
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(join(name, "gamma"), &[channels], ParamKind::Trainable, S::one()),
            beta: Param::filled(join(name, "beta"), &[channels], ParamKind::Trainable, S::zero()),
            running_mean: Param::filled(join(name, "running_mean"), &[channels], ParamKind::Buffer, S::zero()),
            running_var: Param::filled(join(name, "running_var"), &[channels], ParamKind::Buffer, S::one()),
            momentum: Self::MOMENTUM,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, train: bool, keep: bool) -> Tensor<S> {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![S::zero(); c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0f64;
                for b in 0..n {
                    let s = &x.item(b)[ch * plane..(ch + 1) * plane];
                    sum += s.iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let s = &x.item(b)[ch * plane..(ch + 1) * plane];
                    sq += s.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / count;
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                let m = self.momentum;
                let rm = self.running_mean.value[ch].to_f64().unwrap();
                let rv = self.running_var.value[ch].to_f64().unwrap();
                self.running_mean.value[ch] = S::lit((1.0 - m) * rm + m * mean);
                self.running_var.value[ch] = S::lit((1.0 - m) * rv + m * unbiased);
                (mean, var)
            } else {
                (
                    self.running_mean.value[ch].to_f64().unwrap(),
                    self.running_var.value[ch].to_f64().unwrap(),
                )
            };
            inv_std[ch] = S::lit(1.0 / (var + self.eps).sqrt());
            let mean = S::lit(mean);
            for b in 0..n {
                let src = &x.item(b)[ch * plane..(ch + 1) * plane];
                let dst = &mut xhat.item_mut(b)[ch * plane..(ch + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mean) * inv_std[ch];
                }
            }
        }
        let mut out = xhat.clone();
        for b in 0..n {
            for (ch, plane_data) in out.item_mut(b).chunks_mut(plane).enumerate() {
                let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                plane_data.iter_mut().for_each(|v| *v = *v * g + bt);
            }
        }
        self.cache = keep.then_some(BnCache { xhat, inv_std, train });
        out
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let cache = self.cache.take().expect("batchnorm backward without cached forward");
        let [n, c, h, w] = dy.shape();
        let plane = h * w;
        let count = S::lit((n * plane) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = S::zero();
            let mut sum_dy_xhat = S::zero();
            for b in 0..n {
                let d = &dy.item(b)[ch * plane..(ch + 1) * plane];
                let xh = &cache.xhat.item(b)[ch * plane..(ch + 1) * plane];
                for (&dv, &xv) in d.iter().zip(xh) {
                    sum_dy += dv;
                    sum_dy_xhat += dv * xv;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            for b in 0..n {
                let d = &dy.item(b)[ch * plane..(ch + 1) * plane];
                let xh = &cache.xhat.item(b)[ch * plane..(ch + 1) * plane];
                let out = &mut dx.item_mut(b)[ch * plane..(ch + 1) * plane];
                for ((o, &dv), &xv) in out.iter_mut().zip(d).zip(xh) {
                    *o = if cache.train {
                        g * is / count * (count * dv - sum_dy - xv * sum_dy_xhat)
                    } else {
                        g * is * dv
                    };
                }
            }
        }
        dx
    }
}

impl<S: Scalar> HasParams<S> for BatchNorm2d<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<S> {
    output: Option<Tensor<S>>,
}

impl<S: Scalar> Relu<S> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn forward(&mut self, x: &Tensor<S>, keep: bool) -> Tensor<S> {
        let y = x.map(|v| v.max(S::zero()));
        self.output = keep.then(|| y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let y = self.output.take().expect("relu backward without cached forward");
        let mut dx = dy.clone();
        for (d, &o) in dx.data_mut().iter_mut().zip(y.data()) {
            if o <= S::zero() {
                *d = S::zero();
            }
        }
        dx
    }
}

/// Conv → BN → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<S> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
    relu: Relu<S>,
}

impl<S: Scalar> ConvBnRelu<S> {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, opts: ConvOpts, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(&join(name, "conv"), cin, cout, kernel, opts, rng),
            bn: BatchNorm2d::new(&join(name, "bn"), cout),
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, train: bool, keep: bool) -> Tensor<S> {
        let y = self.conv.forward(x, keep);
        let y = self.bn.forward(&y, train, keep);
        self.relu.forward(&y, keep)
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }
}

impl<S: Scalar> HasParams<S> for ConvBnRelu<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Max pooling with square window.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward<S: Scalar>(&mut self, x: &Tensor<S>, keep: bool) -> Tensor<S> {
        let [n, c, h, w] = x.shape();
        let oh = out_extent(h, self.kernel, self.stride, self.pad);
        let ow = out_extent(w, self.kernel, self.stride, self.pad);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let p = self.pad as isize;
        for (pi, (src, dst)) in x
            .data()
            .chunks(h * w)
            .zip(out.data_mut().chunks_mut(oh * ow))
            .enumerate()
        {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    argmax.push(pi * h * w + best_idx);
                }
            }
        }
        self.cache = keep.then_some((x.shape(), argmax));
        out
    }

    pub fn backward<S: Scalar>(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let (shape, argmax) = self.cache.take().expect("maxpool backward without cached forward");
        let mut dx = Tensor::zeros(shape);
        let data = dx.data_mut();
        for (&idx, &g) in argmax.iter().zip(dy.data()) {
            data[idx] += g;
        }
        dx
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<S: Scalar>(x: &Tensor<S>, factor: usize) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for oy in 0..oh {
            let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
            for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *d = srow[ox / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<S: Scalar>(dy: &Tensor<S>, factor: usize) -> Tensor<S> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (src, dst) in dy.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Per-axis interpolation taps for half-pixel-centred bilinear resampling:
/// `(lo, hi, weight_lo, weight_hi)` for each output index.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resize of every plane to `oh x ow`.
pub fn resize_bilinear<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (S::lit(wy0), S::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (S::lit(wx0), S::lit(wx1));
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<S: Scalar>(dy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let [n, c, oh, ow] = dy.shape();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (src, dst) in dy.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (S::lit(wy0), S::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (S::lit(wx0), S::lit(wx1));
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * g;
                dst[y0 * w + x1] += wy0 * wx1 * g;
                dst[y1 * w + x0] += wy1 * wx0 * g;
                dst[y1 * w + x1] += wy1 * wx1 * g;
            }
        }
    }
    dx
}

/// Mean over each plane, giving an `N x C x 1 x 1` tensor.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    let denom = S::lit((h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|plane| {
            let mut acc = S::zero();
            plane.iter().for_each(|&v| acc += v);
            acc / denom
        })
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<S: Scalar>(dy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let [n, c, _, _] = dy.shape();
    let denom = S::lit((h * w) as f64);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (plane, &g) in dx.data_mut().chunks_mut(h * w).zip(dy.data()) {
        plane.iter_mut().for_each(|v| *v = g / denom);
    }
    dx
}

/// Broadcast a `N x C x 1 x 1` tensor over `h x w`.
pub fn broadcast_spatial<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let [n, c, _, _] = x.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for (plane, &v) in out.data_mut().chunks_mut(h * w).zip(x.data()) {
        plane.iter_mut().for_each(|o| *o = v);
    }
    out
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// `x * gate` with `gate` broadcast from `N x C x 1 x 1`.
pub fn scale_channels<S: Scalar>(x: &Tensor<S>, gate: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for (plane, &g) in out.data_mut().chunks_mut(x.plane()).zip(gate.data()) {
        plane.iter_mut().for_each(|v| *v *= g);
    }
    out
}

/// `x * gate` with `gate` broadcast from `N x 1 x H x W`.
pub fn scale_spatial<S: Scalar>(x: &Tensor<S>, gate: &Tensor<S>) -> Tensor<S> {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let mut out = x.clone();
    for b in 0..n {
        let g = gate.item(b);
        for ch in 0..c {
            let dst = &mut out.item_mut(b)[ch * plane..(ch + 1) * plane];
            dst.iter_mut().zip(g).for_each(|(v, &gv)| *v *= gv);
        }
    }
    out
}

/// Gradients of [`scale_channels`] with respect to `x` and `gate`.
pub fn scale_channels_backward<S: Scalar>(
    dy: &Tensor<S>,
    x: &Tensor<S>,
    gate: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let dx = scale_channels(dy, gate);
    let mut dg = Tensor::zeros(gate.shape());
    for ((g, d), xv) in dg
        .data_mut()
        .iter_mut()
        .zip(dy.data().chunks(x.plane()))
        .zip(x.data().chunks(x.plane()))
    {
        let mut acc = S::zero();
        d.iter().zip(xv).for_each(|(&a, &b)| acc += a * b);
        *g = acc;
    }
    (dx, dg)
}

/// Gradients of [`scale_spatial`] with respect to `x` and `gate`.
pub fn scale_spatial_backward<S: Scalar>(
    dy: &Tensor<S>,
    x: &Tensor<S>,
    gate: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let dx = scale_spatial(dy, gate);
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let mut dg = Tensor::zeros(gate.shape());
    for b in 0..n {
        for ch in 0..c {
            let d = &dy.item(b)[ch * plane..(ch + 1) * plane];
            let xv = &x.item(b)[ch * plane..(ch + 1) * plane];
            let g = dg.item_mut(b);
            for i in 0..plane {
                g[i] += d[i] * xv[i];
            }
        }
    }
    (dx, dg)
}
