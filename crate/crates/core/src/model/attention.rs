use rand::Rng;

use crate::nn::{
    broadcast_spatial, global_avg_pool, global_avg_pool_backward, join, scale_channels, scale_channels_backward,
    scale_spatial, scale_spatial_backward, sigmoid, upsample_nearest, upsample_nearest_backward, BatchNorm2d, Conv2d,
    ConvOpts, HasParams, Param, Relu, Scalar, Tensor,
};

/// Concurrent spatial and channel squeeze-and-excitation:
/// `x * cSE(x) + x * sSE(x)`, both gates in (0, 1).
#[derive(Debug, Clone)]
pub struct Scse<S> {
    squeeze: Conv2d<S>,
    squeeze_relu: Relu<S>,
    excite: Conv2d<S>,
    spatial: Conv2d<S>,
    cache: Option<ScseCache<S>>,
}

#[derive(Debug, Clone)]
struct ScseCache<S> {
    x: Tensor<S>,
    channel_gate: Tensor<S>,
    spatial_gate: Tensor<S>,
}

impl<S: Scalar> Scse<S> {
    /// `channels` must be divisible by `reduction`; callers validate this.
    pub fn new(name: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = channels / reduction;
        Self {
            squeeze: Conv2d::new(&join(name, "cse.squeeze"), channels, hidden, 1, ConvOpts::same(1).with_bias(), rng),
            squeeze_relu: Relu::new(),
            excite: Conv2d::new(&join(name, "cse.excite"), hidden, channels, 1, ConvOpts::same(1).with_bias(), rng),
            spatial: Conv2d::new(&join(name, "sse.conv"), channels, 1, 1, ConvOpts::same(1).with_bias(), rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, keep: bool) -> Tensor<S> {
        let pooled = global_avg_pool(x);
        let h = self.squeeze.forward(&pooled, keep);
        let h = self.squeeze_relu.forward(&h, keep);
        let channel_gate = self.excite.forward(&h, keep).map(sigmoid);
        let spatial_gate = self.spatial.forward(x, keep).map(sigmoid);
        let mut out = scale_channels(x, &channel_gate);
        out.add_assign(&scale_spatial(x, &spatial_gate));
        self.cache = keep.then(|| ScseCache {
            x: x.clone(),
            channel_gate,
            spatial_gate,
        });
        out
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let c = self.cache.take().expect("scse backward without cached forward");
        let (h, w) = (c.x.height(), c.x.width());
        let (mut dx, dcg) = scale_channels_backward(dy, &c.x, &c.channel_gate);
        let (dx_s, dsg) = scale_spatial_backward(dy, &c.x, &c.spatial_gate);
        dx.add_assign(&dx_s);

        let mut dcg_pre = dcg;
        for (d, &g) in dcg_pre.data_mut().iter_mut().zip(c.channel_gate.data()) {
            *d *= g * (S::one() - g);
        }
        let dh = self.excite.backward(&dcg_pre);
        let dh = self.squeeze_relu.backward(&dh);
        let dpooled = self.squeeze.backward(&dh);
        dx.add_assign(&global_avg_pool_backward(&dpooled, h, w));

        let mut dsg_pre = dsg;
        for (d, &g) in dsg_pre.data_mut().iter_mut().zip(c.spatial_gate.data()) {
            *d *= g * (S::one() - g);
        }
        dx.add_assign(&self.spatial.backward(&dsg_pre));
        dx
    }
}

impl<S: Scalar> HasParams<S> for Scse<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.squeeze.visit(f);
        self.excite.visit(f);
        self.spatial.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.squeeze.visit_mut(f);
        self.excite.visit_mut(f);
        self.spatial.visit_mut(f);
    }
}

/// Minimum spatial extent accepted by [`Fpa`]: three halvings must fit.
pub const FPA_MIN_SIZE: usize = 8;

/// Feature pyramid attention.
///
/// A 7x7/5x5/3x3 strided pyramid collapses the input to a single-channel
/// attention map that multiplies a 1x1 projection of the input; a
/// global-pooling branch is added on top.
#[derive(Debug, Clone)]
pub struct Fpa<S> {
    global: Conv2d<S>,
    global_relu: Relu<S>,
    mid: Conv2d<S>,
    mid_bn: BatchNorm2d<S>,
    mid_relu: Relu<S>,
    down: [Conv2d<S>; 3],
    down_relu: [Relu<S>; 3],
    refine: [Conv2d<S>; 3],
    cache: Option<FpaCache<S>>,
}

#[derive(Debug, Clone)]
struct FpaCache<S> {
    shape: [usize; 4],
    mid: Tensor<S>,
    attention: Tensor<S>,
}

impl<S: Scalar> Fpa<S> {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let k = [7usize, 5, 3];
        let down = [0, 1, 2].map(|i| {
            let c_in = if i == 0 { cin } else { 1 };
            Conv2d::new(
                &join(name, &format!("down{}", k[i])),
                c_in,
                1,
                k[i],
                ConvOpts::same(k[i]).stride(2).with_bias(),
                rng,
            )
        });
        let refine = [0, 1, 2].map(|i| {
            Conv2d::new(&join(name, &format!("refine{}", k[i])), 1, 1, k[i], ConvOpts::same(k[i]).with_bias(), rng)
        });
        Self {
            global: Conv2d::new(&join(name, "global.conv"), cin, cout, 1, ConvOpts::same(1).with_bias(), rng),
            global_relu: Relu::new(),
            mid: Conv2d::new(&join(name, "mid.conv"), cin, cout, 1, ConvOpts::same(1), rng),
            mid_bn: BatchNorm2d::new(&join(name, "mid.bn"), cout),
            mid_relu: Relu::new(),
            down,
            down_relu: [Relu::new(), Relu::new(), Relu::new()],
            refine,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.mid.out_channels()
    }

    pub fn forward(&mut self, x: &Tensor<S>, train: bool, keep: bool) -> Tensor<S> {
        let (h, w) = (x.height(), x.width());
        let g = self.global.forward(&global_avg_pool(x), keep);
        let g = self.global_relu.forward(&g, keep);

        let m = self.mid.forward(x, keep);
        let m = self.mid_bn.forward(&m, train, keep);
        let m = self.mid_relu.forward(&m, keep);

        let d1 = self.down_relu[0].forward(&self.down[0].forward(x, keep), keep);
        let d2 = self.down_relu[1].forward(&self.down[1].forward(&d1, keep), keep);
        let d3 = self.down_relu[2].forward(&self.down[2].forward(&d2, keep), keep);
        let a3 = self.refine[2].forward(&d3, keep);
        let mut a2 = self.refine[1].forward(&d2, keep);
        a2.add_assign(&upsample_nearest(&a3, 2));
        let mut a1 = self.refine[0].forward(&d1, keep);
        a1.add_assign(&upsample_nearest(&a2, 2));
        let attention = upsample_nearest(&a1, 2);

        let mut out = scale_spatial(&m, &attention);
        out.add_assign(&broadcast_spatial(&g, h, w));
        self.cache = keep.then(|| FpaCache {
            shape: x.shape(),
            mid: m,
            attention,
        });
        out
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let c = self.cache.take().expect("fpa backward without cached forward");
        let [_, _, h, w] = c.shape;

        // Global branch: broadcast back down to 1x1.
        let dg = global_avg_pool(dy).map(|v| v * S::lit((h * w) as f64));
        let dg = self.global_relu.backward(&dg);
        let dpool = self.global.backward(&dg);
        let mut dx = global_avg_pool_backward(&dpool, h, w);

        let (dm, datt) = scale_spatial_backward(dy, &c.mid, &c.attention);
        let dm = self.mid_relu.backward(&dm);
        let dm = self.mid_bn.backward(&dm);
        dx.add_assign(&self.mid.backward(&dm));

        let da1 = upsample_nearest_backward(&datt, 2);
        let da2 = upsample_nearest_backward(&da1, 2);
        let da3 = upsample_nearest_backward(&da2, 2);
        let mut dd1 = self.refine[0].backward(&da1);
        let mut dd2 = self.refine[1].backward(&da2);
        let mut dd3 = self.refine[2].backward(&da3);

        dd3 = self.down_relu[2].backward(&dd3);
        dd2.add_assign(&self.down[2].backward(&dd3));
        dd2 = self.down_relu[1].backward(&dd2);
        dd1.add_assign(&self.down[1].backward(&dd2));
        dd1 = self.down_relu[0].backward(&dd1);
        dx.add_assign(&self.down[0].backward(&dd1));
        dx
    }
}

impl<S: Scalar> HasParams<S> for Fpa<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.global.visit(f);
        self.mid.visit(f);
        self.mid_bn.visit(f);
        for c in self.down.iter().chain(&self.refine) {
            c.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.global.visit_mut(f);
        self.mid.visit_mut(f);
        self.mid_bn.visit_mut(f);
        for c in self.down.iter_mut().chain(&mut self.refine) {
            c.visit_mut(f);
        }
    }
}
