//! Central-difference gradient oracle.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    self, groups_for, AttentionGate, AttentionGateParams, Conv2d, Conv2dParams, DenseBlock, DenseBlockParams, GroupNorm,
    GroupNormParams, StageOrder,
};
use crate::model::UNetModel;
use crate::real::Real;
use crate::tensor::Tensor;

/// A scalar-valued function written once and evaluated at any precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn scalar_of<T: Real>(tape: &Tape<T>, y: Var) -> Result<T> {
    tape.value(y).item().map_err(|_| {
        Error::InvalidArgument(alloc::format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            tape.shape(y)
        ))
    })
}

/// Compares the `f32` reverse-mode gradient of `f` at `x` against central
/// differences evaluated in `f64`. The error per coordinate is
/// `|a - n| / max(1e-8, |a| + |n|)`; the maximum is reported.
pub fn finite_diff_check<F: ScalarFn>(f: &F, x: &Tensor<f32>, h: f64) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.param(x.clone());
    let y = f.eval(&mut tape, xv)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => alloc::vec![0.0; x.numel()],
    };

    let base = x.cast::<f64>();
    let eval_at = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(probe);
        let y = f.eval(&mut tape, v)?;
        scalar_of(&tape, y)
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval_at(plus)? - eval_at(minus)?) / (2.0 * h));
    }

    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
    })
}

/// Layer or small graph exercised by [`LayerProbe`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    /// 3x3, stride 1, padding 1.
    Conv2d,
    /// 3x3, stride 2, padding 1.
    Conv2dStrided,
    /// 2x2, stride 2.
    ConvTranspose2d,
    AvgPool2d,
    GroupNorm,
    /// `sigmoid(x) * relu(x)`.
    ReluSigmoid,
    DenseBlock,
    /// Input channels split in half into `x` and `g`.
    AttentionGate,
    /// `gate(group_norm(conv3x3(x)), x)`.
    ConvNormGate,
}

impl Probe {
    pub const ALL: [Probe; 9] = [
        Probe::Conv2d,
        Probe::Conv2dStrided,
        Probe::ConvTranspose2d,
        Probe::AvgPool2d,
        Probe::GroupNorm,
        Probe::ReluSigmoid,
        Probe::DenseBlock,
        Probe::AttentionGate,
        Probe::ConvNormGate,
    ];
}

#[derive(Clone, Debug)]
enum Bundle<P> {
    None,
    Conv(Conv2d<P>),
    Norm(GroupNorm<P>),
    Dense(DenseBlock<P>),
    Gate(AttentionGate<P>),
    Composite(Conv2d<P>, GroupNorm<P>, AttentionGate<P>),
}

impl<P> Bundle<P> {
    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Bundle<Q> {
        match self {
            Bundle::None => Bundle::None,
            Bundle::Conv(c) => Bundle::Conv(c.map(f)),
            Bundle::Norm(n) => Bundle::Norm(n.map(f)),
            Bundle::Dense(d) => Bundle::Dense(d.map(f)),
            Bundle::Gate(g) => Bundle::Gate(g.map(f)),
            Bundle::Composite(c, n, g) => Bundle::Composite(c.map(f), n.map(f), g.map(f)),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        match self {
            Bundle::None => {}
            Bundle::Conv(c) => c.visit_mut("conv", f),
            Bundle::Norm(n) => n.visit_mut("norm", f),
            Bundle::Dense(d) => d.visit_mut("dense", f),
            Bundle::Gate(g) => g.visit_mut("gate", f),
            Bundle::Composite(c, n, g) => {
                c.visit_mut("conv", f);
                n.visit_mut("norm", f);
                g.visit_mut("gate", f);
            }
        }
    }
}

/// A randomly parameterized layer reduced to a scalar by a fixed random
/// weighting of its output, differentiable with respect to its input or to
/// any one of its parameter tensors.
#[derive(Clone, Debug)]
pub struct LayerProbe {
    pub kind: Probe,
    input: Tensor<f32>,
    params: Bundle<Tensor<f32>>,
    names: Vec<alloc::string::String>,
    wrt: Option<usize>,
    seed: u64,
}

impl LayerProbe {
    /// `input_shape` is `(H, W, C)`; pooling and strided probes need even
    /// extents, gate probes an even channel count.
    pub fn new(kind: Probe, input_shape: [usize; 3], seed: u64) -> Result<Self> {
        let [_, _, c] = input_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match kind {
            Probe::Conv2d => Bundle::Conv(Conv2dParams::init(3, 3, c, 3, 1, 1, &mut rng)),
            Probe::Conv2dStrided => Bundle::Conv(Conv2dParams::init(3, 3, c, 3, 2, 1, &mut rng)),
            Probe::ConvTranspose2d => Bundle::Conv(Conv2dParams::init(2, 2, c, 3, 2, 0, &mut rng)),
            Probe::AvgPool2d | Probe::ReluSigmoid => Bundle::None,
            Probe::GroupNorm => Bundle::Norm(GroupNormParams::new(c, groups_for(c, 2), 1e-5)?),
            Probe::DenseBlock => {
                Bundle::Dense(DenseBlockParams::init(c, 3, 4, 2, 1e-5, StageOrder::ConvReluNorm, &mut rng)?)
            }
            Probe::AttentionGate => {
                if c < 2 || c % 2 != 0 {
                    return Err(Error::InvalidArgument(alloc::format!("gate probe needs an even channel count, got {c}")));
                }
                let half = c / 2;
                Bundle::Gate(AttentionGateParams::init(half, half, AttentionGateParams::default_mid(half), &mut rng))
            }
            Probe::ConvNormGate => Bundle::Composite(
                Conv2dParams::init(3, 3, c, 4, 1, 1, &mut rng),
                GroupNormParams::new(4, 2, 1e-5)?,
                AttentionGateParams::init(4, c, 2, &mut rng),
            ),
        };
        let mut probe = Self {
            kind,
            input: Tensor::randn(&input_shape, seed ^ 0x5eed, 1.0)?,
            params,
            names: Vec::new(),
            wrt: None,
            seed,
        };
        // Generic values: nonzero biases and betas, gammas away from one.
        let mut k = 0u64;
        let mut names = Vec::new();
        probe.params.visit_mut(&mut |name, t| {
            k += 1;
            let noise = Tensor::<f32>::randn(t.shape(), seed.wrapping_mul(31).wrapping_add(k), 0.3).unwrap();
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
            names.push(alloc::string::String::from(name));
        });
        probe.names = names;
        Ok(probe)
    }

    pub fn param_names(&self) -> &[alloc::string::String] {
        &self.names
    }

    /// Differentiate with respect to parameter `i` instead of the input.
    pub fn wrt_param(mut self, i: usize) -> Result<Self> {
        if i >= self.names.len() {
            return Err(Error::InvalidArgument(alloc::format!("probe has {} parameters, asked for {i}", self.names.len())));
        }
        self.wrt = Some(i);
        Ok(self)
    }

    /// The point at which the gradient is checked.
    pub fn point(&self) -> Tensor<f32> {
        match self.wrt {
            None => self.input.clone(),
            Some(i) => {
                let mut k = 0;
                let mut out = None;
                self.params.map(&mut |t: &Tensor<f32>| {
                    if k == i {
                        out = Some(t.clone());
                    }
                    k += 1;
                });
                out.unwrap()
            }
        }
    }

    fn layer<T: Real>(&self, tape: &mut Tape<T>, x: Var, p: &Bundle<Var>) -> Result<Var> {
        Ok(match (self.kind, p) {
            (Probe::Conv2d | Probe::Conv2dStrided, Bundle::Conv(c)) => nn::conv2d(tape, x, c)?,
            (Probe::ConvTranspose2d, Bundle::Conv(c)) => nn::conv_transpose2d(tape, x, c)?,
            (Probe::AvgPool2d, _) => tape.avg_pool2d(x)?,
            (Probe::GroupNorm, Bundle::Norm(n)) => nn::group_norm(tape, x, n)?,
            (Probe::ReluSigmoid, _) => {
                let r = tape.relu(x);
                let s = tape.sigmoid(x);
                tape.mul(r, s)?
            }
            (Probe::DenseBlock, Bundle::Dense(d)) => nn::dense_block(tape, x, d)?,
            (Probe::AttentionGate, Bundle::Gate(g)) => {
                let half = tape.shape(x)[2] / 2;
                let xs = tape.slice_channels(x, 0, half)?;
                let gs = tape.slice_channels(x, half, half)?;
                nn::attention_gate(tape, xs, gs, g)?.0
            }
            (Probe::ConvNormGate, Bundle::Composite(c, n, g)) => {
                let y = nn::conv2d(tape, x, c)?;
                let y = nn::group_norm(tape, y, n)?;
                nn::attention_gate(tape, y, x, g)?.0
            }
            _ => unreachable!("probe parameters always match the probe kind"),
        })
    }
}

impl ScalarFn for LayerProbe {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, probe: Var) -> Result<Var> {
        let (x, p) = match self.wrt {
            None => (probe, self.params.map(&mut |t: &Tensor<f32>| tape.constant(t.cast()))),
            Some(i) => {
                let x = tape.constant(self.input.cast());
                let mut k = 0;
                let p = self.params.map(&mut |t: &Tensor<f32>| {
                    let v = if k == i { probe } else { tape.constant(t.cast()) };
                    k += 1;
                    v
                });
                (x, p)
            }
        };
        let y = self.layer(tape, x, &p)?;
        let w = Tensor::<f32>::randn(tape.shape(y), self.seed ^ 0xfeed, 1.0)?;
        let wv = tape.constant(w.cast());
        let prod = tape.mul(y, wv)?;
        Ok(tape.sum_all(prod))
    }
}

/// A whole network reduced to a scalar by a fixed random weighting of its
/// output, differentiable with respect to the input or one named parameter.
pub struct ModelProbe<'a> {
    model: &'a UNetModel,
    input: Tensor<f32>,
    param: Option<alloc::string::String>,
    seed: u64,
}

impl<'a> ModelProbe<'a> {
    pub fn wrt_input(model: &'a UNetModel, input: Tensor<f32>, seed: u64) -> Self {
        Self { model, input, param: None, seed }
    }

    pub fn wrt_param(model: &'a UNetModel, input: Tensor<f32>, name: &str, seed: u64) -> Result<Self> {
        if !model.named_parameters().iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(alloc::format!("model has no parameter {name:?}")));
        }
        Ok(Self { model, input, param: Some(name.into()), seed })
    }

    pub fn point(&self) -> Tensor<f32> {
        match &self.param {
            None => self.input.clone(),
            Some(name) => self.model.named_parameters().into_iter().find(|(n, _)| n == name).unwrap().1.clone(),
        }
    }
}

impl ScalarFn for ModelProbe<'_> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, probe: Var) -> Result<Var> {
        let mut p = self.model.bind(tape);
        let x = match &self.param {
            None => probe,
            Some(name) => {
                p.visit_mut(&mut |n, v| {
                    if n == name {
                        *v = probe;
                    }
                });
                tape.constant(self.input.cast())
            }
        };
        let y = self.model.forward_bound(tape, &p, x)?.output;
        let w = Tensor::<f32>::randn(tape.shape(y), self.seed ^ 0xfeed, 1.0)?;
        let wv = tape.constant(w.cast());
        let prod = tape.mul(y, wv)?;
        Ok(tape.sum_all(prod))
    }
}
