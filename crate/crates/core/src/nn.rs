//! Layers of the attention-gated U-Net.
//!
//! Parameter bundles are generic over the parameter handle: `P = Tensor<f32>`
//! for stored weights, `P = Var` once bound to a [`Tape`] for a forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{mismatch, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Order of operations inside a convolution stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StageOrder {
    /// Conv -> ReLU -> GroupNorm.
    #[default]
    ConvReluNorm,
    /// Conv -> GroupNorm -> ReLU.
    ConvNormRelu,
}

impl StageOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            StageOrder::ConvReluNorm => "conv-relu-norm",
            StageOrder::ConvNormRelu => "conv-norm-relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv-relu-norm" => Some(StageOrder::ConvReluNorm),
            "conv-norm-relu" => Some(StageOrder::ConvNormRelu),
            _ => None,
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<P = Tensor<f32>> {
    /// `(kH, kW, C_in, C_out)`
    pub weight: P,
    /// `(C_out)`
    pub bias: P,
    pub stride: usize,
    pub padding: usize,
}

pub type Conv2dParams = Conv2d<Tensor<f32>>;

impl<P> Conv2d<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Conv2d<Q> {
        Conv2d {
            weight: f(&self.weight),
            bias: f(&self.bias),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Conv2dParams {
    /// Weights uniform in `±sqrt(1 / (kH * kW * C_in))`, zero bias.
    pub fn init<R: Rng>(kh: usize, kw: usize, ci: usize, co: usize, stride: usize, padding: usize, rng: &mut R) -> Self {
        let bound = libm::sqrt(1.0 / (kh * kw * ci) as f64) as f32;
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..kh * kw * ci * co).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Tensor::from_vec(&[kh, kw, ci, co], data).unwrap().with_grad(),
            bias: Tensor::zeros(&[co]).unwrap().with_grad(),
            stride,
            padding,
        }
    }

    pub fn from_tensors(weight: Tensor<f32>, bias: Tensor<f32>, stride: usize, padding: usize) -> Result<Self> {
        match *weight.shape() {
            [_, _, _, co] if bias.shape() == [co] => {}
            _ => return Err(mismatch("conv2d params", weight.shape(), bias.shape())),
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        Ok(Self { weight: weight.with_grad(), bias: bias.with_grad(), stride, padding })
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm<P = Tensor<f32>> {
    pub gamma: P,
    pub beta: P,
    pub num_groups: usize,
    pub epsilon: f64,
}

pub type GroupNormParams = GroupNorm<Tensor<f32>>;

/// `preferred` groups when it divides `channels`, otherwise a single group.
pub fn groups_for(channels: usize, preferred: usize) -> usize {
    if preferred >= 1 && channels >= preferred && channels % preferred == 0 {
        preferred
    } else {
        1
    }
}

impl<P> GroupNorm<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> GroupNorm<Q> {
        GroupNorm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
            num_groups: self.num_groups,
            epsilon: self.epsilon,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

impl GroupNormParams {
    /// gamma = 1, beta = 0.
    pub fn new(channels: usize, num_groups: usize, epsilon: f64) -> Result<Self> {
        if num_groups == 0 || channels % num_groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible into {num_groups} groups"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            gamma: Tensor::ones(&[channels]).unwrap().with_grad(),
            beta: Tensor::zeros(&[channels]).unwrap().with_grad(),
            num_groups,
            epsilon,
        })
    }
}

/// One 3x3 convolution followed by ReLU and group normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<P = Tensor<f32>> {
    pub conv: Conv2d<P>,
    pub norm: GroupNorm<P>,
}

impl<P> Stage<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Stage<Q> {
        Stage { conv: self.conv.map(f), norm: self.norm.map(f) }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

impl Stage<Tensor<f32>> {
    pub fn init<R: Rng>(ci: usize, co: usize, groups: usize, eps: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv: Conv2dParams::init(3, 3, ci, co, 1, 1, rng),
            norm: GroupNormParams::new(co, groups_for(co, groups), eps)?,
        })
    }
}

/// Three stages with dense connections:
/// `s1 = stage(x)`, `s2 = stage([x, s1])`, `out = conv1x1([x, s1, s2])`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock<P = Tensor<f32>> {
    pub stage1: Stage<P>,
    pub stage2: Stage<P>,
    pub stage3: Conv2d<P>,
    pub order: StageOrder,
}

pub type DenseBlockParams = DenseBlock<Tensor<f32>>;

impl<P> DenseBlock<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> DenseBlock<Q> {
        DenseBlock {
            stage1: self.stage1.map(f),
            stage2: self.stage2.map(f),
            stage3: self.stage3.map(f),
            order: self.order,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.stage1.visit(&join(prefix, "stage1"), f);
        self.stage2.visit(&join(prefix, "stage2"), f);
        self.stage3.visit(&join(prefix, "stage3"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.stage1.visit_mut(&join(prefix, "stage1"), f);
        self.stage2.visit_mut(&join(prefix, "stage2"), f);
        self.stage3.visit_mut(&join(prefix, "stage3"), f);
    }
}

impl DenseBlockParams {
    pub fn init<R: Rng>(
        ci: usize,
        growth: usize,
        co: usize,
        groups: usize,
        eps: f64,
        order: StageOrder,
        rng: &mut R,
    ) -> Result<Self> {
        if ci == 0 || growth == 0 || co == 0 {
            return Err(Error::InvalidConfig(format!(
                "dense block channels must be positive (in {ci}, growth {growth}, out {co})"
            )));
        }
        Ok(Self {
            stage1: Stage::init(ci, growth, groups, eps, rng)?,
            stage2: Stage::init(ci + growth, growth, groups, eps, rng)?,
            stage3: Conv2dParams::init(1, 1, ci + 2 * growth, co, 1, 0, rng),
            order,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.stage1.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.stage3.out_channels()
    }
}

/// Two stages applied in sequence (expansion-path block).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<P = Tensor<f32>> {
    pub first: Stage<P>,
    pub second: Stage<P>,
    pub order: StageOrder,
}

impl<P> ConvBlock<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ConvBlock<Q> {
        ConvBlock { first: self.first.map(f), second: self.second.map(f), order: self.order }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}

impl ConvBlock<Tensor<f32>> {
    pub fn init<R: Rng>(ci: usize, co: usize, groups: usize, eps: f64, order: StageOrder, rng: &mut R) -> Result<Self> {
        Ok(Self {
            first: Stage::init(ci, co, groups, eps, rng)?,
            second: Stage::init(co, co, groups, eps, rng)?,
            order,
        })
    }
}

/// Additive attention gate on a skip connection. All three convolutions
/// are 1x1 without activation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGate<P = Tensor<f32>> {
    /// `C_x -> C_mid`
    pub theta_x: Conv2d<P>,
    /// `C_g -> C_mid`
    pub theta_g: Conv2d<P>,
    /// `C_mid -> 1`
    pub psi: Conv2d<P>,
}

pub type AttentionGateParams = AttentionGate<Tensor<f32>>;

impl<P> AttentionGate<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> AttentionGate<Q> {
        AttentionGate {
            theta_x: self.theta_x.map(f),
            theta_g: self.theta_g.map(f),
            psi: self.psi.map(f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.theta_x.visit(&join(prefix, "theta_x"), f);
        self.theta_g.visit(&join(prefix, "theta_g"), f);
        self.psi.visit(&join(prefix, "psi"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.theta_x.visit_mut(&join(prefix, "theta_x"), f);
        self.theta_g.visit_mut(&join(prefix, "theta_g"), f);
        self.psi.visit_mut(&join(prefix, "psi"), f);
    }
}

impl AttentionGateParams {
    /// Intermediate width defaults to `max(C_x / 2, 1)`.
    pub fn default_mid(cx: usize) -> usize {
        (cx / 2).max(1)
    }

    pub fn init<R: Rng>(cx: usize, cg: usize, mid: usize, rng: &mut R) -> Self {
        Self {
            theta_x: Conv2dParams::init(1, 1, cx, mid, 1, 0, rng),
            theta_g: Conv2dParams::init(1, 1, cg, mid, 1, 0, rng),
            psi: Conv2dParams::init(1, 1, mid, 1, 1, 0, rng),
        }
    }
}

/// Leaf-binding closure for `map`: records each stored tensor on `tape`.
pub fn binder<T: Real>(tape: &mut Tape<T>) -> impl FnMut(&Tensor<f32>) -> Var + '_ {
    move |t| tape.leaf(t.cast::<T>())
}

pub fn conv2d<T: Real>(tape: &mut Tape<T>, x: Var, p: &Conv2d<Var>) -> Result<Var> {
    tape.conv2d(x, p.weight, Some(p.bias), p.stride, p.padding)
}

pub fn conv_transpose2d<T: Real>(tape: &mut Tape<T>, x: Var, p: &Conv2d<Var>) -> Result<Var> {
    tape.conv_transpose2d(x, p.weight, Some(p.bias), p.stride, p.padding)
}

pub fn group_norm<T: Real>(tape: &mut Tape<T>, x: Var, p: &GroupNorm<Var>) -> Result<Var> {
    tape.group_norm(x, p.gamma, p.beta, p.num_groups, p.epsilon)
}

pub fn stage<T: Real>(tape: &mut Tape<T>, x: Var, p: &Stage<Var>, order: StageOrder) -> Result<Var> {
    let y = conv2d(tape, x, &p.conv)?;
    match order {
        StageOrder::ConvReluNorm => {
            let y = tape.relu(y);
            group_norm(tape, y, &p.norm)
        }
        StageOrder::ConvNormRelu => {
            let y = group_norm(tape, y, &p.norm)?;
            Ok(tape.relu(y))
        }
    }
}

pub fn dense_block<T: Real>(tape: &mut Tape<T>, x: Var, p: &DenseBlock<Var>) -> Result<Var> {
    let s1 = stage(tape, x, &p.stage1, p.order)?;
    let cat1 = tape.concat_channels(&[x, s1])?;
    let s2 = stage(tape, cat1, &p.stage2, p.order)?;
    let cat2 = tape.concat_channels(&[x, s1, s2])?;
    conv2d(tape, cat2, &p.stage3)
}

pub fn conv_block<T: Real>(tape: &mut Tape<T>, x: Var, p: &ConvBlock<Var>) -> Result<Var> {
    let y = stage(tape, x, &p.first, p.order)?;
    stage(tape, y, &p.second, p.order)
}

/// Returns `(gated, alpha)` where
/// `alpha = sigmoid(psi(relu(theta_x(x) + theta_g(g))))` has one channel and
/// `gated = x * alpha` broadcast over the channels of `x`.
pub fn attention_gate<T: Real>(tape: &mut Tape<T>, x: Var, g: Var, p: &AttentionGate<Var>) -> Result<(Var, Var)> {
    let (xs, gs) = (tape.shape(x), tape.shape(g));
    if xs.len() != 3 || gs.len() != 3 || xs[..2] != gs[..2] {
        return Err(mismatch("attention_gate", xs, gs));
    }
    let tx = conv2d(tape, x, &p.theta_x)?;
    let tg = conv2d(tape, g, &p.theta_g)?;
    let sum = tape.add(tx, tg)?;
    let act = tape.relu(sum);
    let logits = conv2d(tape, act, &p.psi)?;
    let alpha = tape.sigmoid(logits);
    let gated = tape.mul(x, alpha)?;
    Ok((gated, alpha))
}

/// Direct nested-loop convolution in `f64`; the reference for [`conv2d`].
pub fn conv2d_naive(x: &Tensor<f32>, p: &Conv2dParams) -> Result<Tensor<f64>> {
    let (h, w, ci) = x.hwc()?;
    let (kh, kw) = p.kernel();
    let co = p.out_channels();
    if p.in_channels() != ci {
        return Err(mismatch("conv2d_naive", x.shape(), p.weight.shape()));
    }
    let (s, pad) = (p.stride as i64, p.padding as i64);
    let ho = (h as i64 + 2 * pad - kh as i64).div_euclid(s) + 1;
    let wo = (w as i64 + 2 * pad - kw as i64).div_euclid(s) + 1;
    if ho <= 0 || wo <= 0 || h as i64 + 2 * pad < kh as i64 || w as i64 + 2 * pad < kw as i64 {
        return Err(Error::InvalidArgument("kernel larger than padded input".into()));
    }
    let (ho, wo) = (ho as usize, wo as usize);
    let (xd, wd, bd) = (x.data(), p.weight.data(), p.bias.data());
    let mut out = vec![0.0f64; ho * wo * co];
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..co {
                let mut acc = bd[o] as f64;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = oy as i64 * s + ky as i64 - pad;
                        let ix = ox as i64 * s + kx as i64 - pad;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for c in 0..ci {
                            let xv = xd[(iy as usize * w + ix as usize) * ci + c] as f64;
                            let wv = wd[((ky * kw + kx) * ci + c) * co + o] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(oy * wo + ox) * co + o] = acc;
            }
        }
    }
    Tensor::from_vec(&[ho, wo, co], out)
}
