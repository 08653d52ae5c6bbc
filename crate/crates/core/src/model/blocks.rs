use rand::Rng;

use crate::nn::{join, BatchNorm2d, Conv2d, ConvBnRelu, ConvOpts, HasParams, MaxPool2d, Param, Relu, Scalar, Tensor};

/// Projection shortcut used when a residual block changes shape.
#[derive(Debug, Clone)]
pub struct Shortcut<S> {
    conv: Conv2d<S>,
    bn: BatchNorm2d<S>,
}

impl<S: Scalar> Shortcut<S> {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(&join(name, "conv"), cin, cout, 1, ConvOpts { stride, pad: 0, groups: 1, bias: false }, rng),
            bn: BatchNorm2d::new(&join(name, "bn"), cout),
        }
    }

    fn forward(&mut self, x: &Tensor<S>, train: bool, keep: bool) -> Tensor<S> {
        let y = self.conv.forward(x, keep);
        self.bn.forward(&y, train, keep)
    }

    fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let d = self.bn.backward(dy);
        self.conv.backward(&d)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Two 3x3 convolutions with an identity or projection shortcut.
#[derive(Debug, Clone)]
pub struct BasicBlock<S> {
    c1: ConvBnRelu<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    shortcut: Option<Shortcut<S>>,
    out_relu: Relu<S>,
}

impl<S: Scalar> BasicBlock<S> {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| Shortcut::new(&join(name, "downsample"), cin, cout, stride, rng));
        Self {
            c1: ConvBnRelu::new(&join(name, "1"), cin, cout, 3, ConvOpts::same(3).stride(stride), rng),
            conv2: Conv2d::new(&join(name, "2.conv"), cout, cout, 3, ConvOpts::same(3), rng),
            bn2: BatchNorm2d::new(&join(name, "2.bn"), cout),
            shortcut,
            out_relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor<S>, train: bool, keep: bool) -> Tensor<S> {
        let y = self.c1.forward(x, train, keep);
        let y = self.conv2.forward(&y, keep);
        let mut y = self.bn2.forward(&y, train, keep);
        match &mut self.shortcut {
            Some(sc) => y.add_assign(&sc.forward(x, train, keep)),
            None => y.add_assign(x),
        }
        self.out_relu.forward(&y, keep)
    }

    fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let d = self.out_relu.backward(dy);
        let dm = self.bn2.backward(&d);
        let dm = self.conv2.backward(&dm);
        let mut dx = self.c1.backward(&dm);
        match &mut self.shortcut {
            Some(sc) => dx.add_assign(&sc.backward(&d)),
            None => dx.add_assign(&d),
        }
        dx
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.c1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some(sc) = &self.shortcut {
            sc.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.c1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_mut(f);
        }
    }
}

/// 1x1 reduce, grouped 3x3, 1x1 expand, plus shortcut.
#[derive(Debug, Clone)]
pub struct GroupedBottleneck<S> {
    reduce: ConvBnRelu<S>,
    grouped: ConvBnRelu<S>,
    expand: Conv2d<S>,
    bn3: BatchNorm2d<S>,
    shortcut: Option<Shortcut<S>>,
    out_relu: Relu<S>,
}

impl<S: Scalar> GroupedBottleneck<S> {
    pub fn new(
        name: &str,
        cin: usize,
        width: usize,
        cout: usize,
        groups: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| Shortcut::new(&join(name, "downsample"), cin, cout, stride, rng));
        Self {
            reduce: ConvBnRelu::new(&join(name, "1"), cin, width, 1, ConvOpts::same(1), rng),
            grouped: ConvBnRelu::new(
                &join(name, "2"),
                width,
                width,
                3,
                ConvOpts::same(3).stride(stride).groups(groups),
                rng,
            ),
            expand: Conv2d::new(&join(name, "3.conv"), width, cout, 1, ConvOpts::same(1), rng),
            bn3: BatchNorm2d::new(&join(name, "3.bn"), cout),
            shortcut,
            out_relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor<S>, train: bool, keep: bool) -> Tensor<S> {
        let y = self.reduce.forward(x, train, keep);
        let y = self.grouped.forward(&y, train, keep);
        let y = self.expand.forward(&y, keep);
        let mut y = self.bn3.forward(&y, train, keep);
        match &mut self.shortcut {
            Some(sc) => y.add_assign(&sc.forward(x, train, keep)),
            None => y.add_assign(x),
        }
        self.out_relu.forward(&y, keep)
    }

    fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let d = self.out_relu.backward(dy);
        let dm = self.bn3.backward(&d);
        let dm = self.expand.backward(&dm);
        let dm = self.grouped.backward(&dm);
        let mut dx = self.reduce.backward(&dm);
        match &mut self.shortcut {
            Some(sc) => dx.add_assign(&sc.backward(&d)),
            None => dx.add_assign(&d),
        }
        dx
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.reduce.visit(f);
        self.grouped.visit(f);
        self.expand.visit(f);
        self.bn3.visit(f);
        if let Some(sc) = &self.shortcut {
            sc.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.reduce.visit_mut(f);
        self.grouped.visit_mut(f);
        self.expand.visit_mut(f);
        self.bn3.visit_mut(f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub enum Block<S> {
    ConvBnRelu(ConvBnRelu<S>),
    MaxPool(MaxPool2d),
    Basic(BasicBlock<S>),
    Bottleneck(GroupedBottleneck<S>),
}

impl<S: Scalar> Block<S> {
    fn forward(&mut self, x: &Tensor<S>, train: bool, keep: bool) -> Tensor<S> {
        match self {
            Block::ConvBnRelu(b) => b.forward(x, train, keep),
            Block::MaxPool(p) => p.forward(x, keep),
            Block::Basic(b) => b.forward(x, train, keep),
            Block::Bottleneck(b) => b.forward(x, train, keep),
        }
    }

    fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        match self {
            Block::ConvBnRelu(b) => b.backward(dy),
            Block::MaxPool(p) => p.backward(dy),
            Block::Basic(b) => b.backward(dy),
            Block::Bottleneck(b) => b.backward(dy),
        }
    }
}

/// One encoder stage: a chain of blocks ending at a fixed resolution.
#[derive(Debug, Clone)]
pub struct Stage<S> {
    pub blocks: Vec<Block<S>>,
    pub out_channels: usize,
}

impl<S: Scalar> Stage<S> {
    pub fn forward(&mut self, x: &Tensor<S>, train: bool, keep: bool) -> Tensor<S> {
        let mut y = x.clone();
        for b in &mut self.blocks {
            y = b.forward(&y, train, keep);
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let mut d = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        d
    }
}

impl<S: Scalar> HasParams<S> for Stage<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        for b in &self.blocks {
            match b {
                Block::ConvBnRelu(l) => l.visit(f),
                Block::MaxPool(_) => {}
                Block::Basic(l) => l.visit(f),
                Block::Bottleneck(l) => l.visit(f),
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for b in &mut self.blocks {
            match b {
                Block::ConvBnRelu(l) => l.visit_mut(f),
                Block::MaxPool(_) => {}
                Block::Basic(l) => l.visit_mut(f),
                Block::Bottleneck(l) => l.visit_mut(f),
            }
        }
    }
}

fn stem<S: Scalar>(name: &str, cin: usize, rng: &mut impl Rng) -> Stage<S> {
    Stage {
        blocks: vec![Block::ConvBnRelu(ConvBnRelu::new(
            &join(name, "stem"),
            cin,
            64,
            7,
            ConvOpts::same(7).stride(2),
            rng,
        ))],
        out_channels: 64,
    }
}

/// ResNet-34 layout: stem, then basic-block stages of depth 3, 4, 6, 3.
pub fn residual34<S: Scalar>(in_channels: usize, rng: &mut impl Rng) -> Vec<Stage<S>> {
    let mut stages = vec![stem("encoder.0", in_channels, rng)];
    let mut cin = 64;
    for (i, (&depth, &cout)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        let name = format!("encoder.{}", i + 1);
        let mut blocks = Vec::new();
        if i == 0 {
            blocks.push(Block::MaxPool(MaxPool2d::new(3, 2, 1)));
        }
        for d in 0..depth {
            let stride = if d == 0 && i > 0 { 2 } else { 1 };
            blocks.push(Block::Basic(BasicBlock::new(&format!("{name}.{d}"), cin, cout, stride, rng)));
            cin = cout;
        }
        stages.push(Stage { blocks, out_channels: cout });
    }
    stages
}

/// ResNeXt-50 (32x4d) layout: stem, then grouped bottleneck stages of depth 3, 4, 6, 3.
pub fn residual_grouped50<S: Scalar>(in_channels: usize, rng: &mut impl Rng) -> Vec<Stage<S>> {
    let mut stages = vec![stem("encoder.0", in_channels, rng)];
    let mut cin = 64;
    let plan = [(3usize, 128usize, 256usize), (4, 256, 512), (6, 512, 1024), (3, 1024, 2048)];
    for (i, &(depth, width, cout)) in plan.iter().enumerate() {
        let name = format!("encoder.{}", i + 1);
        let mut blocks = Vec::new();
        if i == 0 {
            blocks.push(Block::MaxPool(MaxPool2d::new(3, 2, 1)));
        }
        for d in 0..depth {
            let stride = if d == 0 && i > 0 { 2 } else { 1 };
            blocks.push(Block::Bottleneck(GroupedBottleneck::new(
                &format!("{name}.{d}"),
                cin,
                width,
                cout,
                32,
                stride,
                rng,
            )));
            cin = cout;
        }
        stages.push(Stage { blocks, out_channels: cout });
    }
    stages
}

/// Four stages of (conv, basic block) for CPU-scale runs. The first stage
/// keeps full resolution, the others halve it.
pub fn tiny<S: Scalar>(in_channels: usize, widths: &[usize; 4], rng: &mut impl Rng) -> Vec<Stage<S>> {
    let mut cin = in_channels;
    widths
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let name = format!("encoder.{i}");
            let stage = Stage {
                blocks: vec![
                    Block::ConvBnRelu(ConvBnRelu::new(
                        &join(&name, "down"),
                        cin,
                        c,
                        3,
                        ConvOpts::same(3).stride(if i == 0 { 1 } else { 2 }),
                        rng,
                    )),
                    Block::Basic(BasicBlock::new(&join(&name, "res"), c, c, 1, rng)),
                ],
                out_channels: c,
            };
            cin = c;
            stage
        })
        .collect()
}
