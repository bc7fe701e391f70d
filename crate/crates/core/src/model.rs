//! Attention-gated U-Net.
//!
//! Contraction: dense block then 2x2 average pooling, `depth` times, then a
//! bottleneck dense block. Expansion: for each level from the bottom up, a
//! 2x2/stride-2 transposed convolution produces the gating signal `g`, the
//! matching contraction output passes through an attention gate, and the two
//! are concatenated (`[gated skip, g]`) into a two-stage conv block. A final
//! 1x1 convolution maps to the output channels, with no output activation.
//!
//! Inputs are zero-padded at the bottom/right to a multiple of `2^depth` and
//! the output is cropped back.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Margins, Tape, Var};
use crate::error::{mismatch, Error, Result};
use crate::nn::{
    self, binder, AttentionGate, AttentionGateParams, Conv2d, Conv2dParams, ConvBlock, DenseBlock,
    DenseBlockParams, StageOrder,
};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    pub growth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub attention_enabled: bool,
    pub norm_groups: usize,
    pub norm_epsilon: f64,
    pub stage_order: StageOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            channel_multiplier: 2,
            growth: 8,
            in_channels: 124,
            out_channels: 54,
            attention_enabled: true,
            norm_groups: 4,
            norm_epsilon: 1e-5,
            stage_order: StageOrder::ConvReluNorm,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.depth > 12 {
            return bad("depth above 12 is not supported");
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("in_channels and out_channels must be positive");
        }
        if self.base_channels == 0 || self.channel_multiplier == 0 || self.growth == 0 {
            return bad("base_channels, channel_multiplier and growth must be positive");
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive");
        }
        if !(self.norm_epsilon > 0.0) {
            return bad("norm_epsilon must be positive");
        }
        Ok(())
    }

    /// Output channels of contraction level `i` (`i == depth` is the bottleneck).
    pub fn level_channels(&self, i: usize) -> usize {
        self.base_channels * self.channel_multiplier.pow(i as u32)
    }

    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Canonical `key=value` text, one entry per line.
    pub fn to_text(&self) -> String {
        format!(
            "depth={}\nbase_channels={}\nchannel_multiplier={}\ngrowth={}\nin_channels={}\nout_channels={}\nattention_enabled={}\nnorm_groups={}\nnorm_epsilon={:e}\nstage_order={}\n",
            self.depth,
            self.base_channels,
            self.channel_multiplier,
            self.growth,
            self.in_channels,
            self.out_channels,
            self.attention_enabled,
            self.norm_groups,
            self.norm_epsilon,
            self.stage_order.as_str(),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let bad = |k: &str, v: &str| Error::InvalidConfig(format!("bad value {v:?} for {k}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<usize>().map_err(|_| bad(k, v));
            match k {
                "depth" => cfg.depth = num()?,
                "base_channels" => cfg.base_channels = num()?,
                "channel_multiplier" => cfg.channel_multiplier = num()?,
                "growth" => cfg.growth = num()?,
                "in_channels" => cfg.in_channels = num()?,
                "out_channels" => cfg.out_channels = num()?,
                "norm_groups" => cfg.norm_groups = num()?,
                "attention_enabled" => cfg.attention_enabled = v.parse().map_err(|_| bad(k, v))?,
                "norm_epsilon" => cfg.norm_epsilon = v.parse().map_err(|_| bad(k, v))?,
                "stage_order" => cfg.stage_order = StageOrder::parse(v).ok_or_else(|| bad(k, v))?,
                _ => return Err(Error::InvalidConfig(format!("unknown key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every learnable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams<P = Tensor<f32>> {
    pub encoders: Vec<DenseBlock<P>>,
    pub bottleneck: DenseBlock<P>,
    /// `upsamplers[i]` maps level `i + 1` features to level `i`.
    pub upsamplers: Vec<Conv2d<P>>,
    /// One per skip connection when attention is enabled, empty otherwise.
    pub gates: Vec<AttentionGate<P>>,
    pub decoders: Vec<ConvBlock<P>>,
    pub head: Conv2d<P>,
}

impl<P> UNetParams<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> UNetParams<Q> {
        UNetParams {
            encoders: self.encoders.iter().map(|b| b.map(f)).collect(),
            bottleneck: self.bottleneck.map(f),
            upsamplers: self.upsamplers.iter().map(|c| c.map(f)).collect(),
            gates: self.gates.iter().map(|g| g.map(f)).collect(),
            decoders: self.decoders.iter().map(|d| d.map(f)).collect(),
            head: self.head.map(f),
        }
    }

    /// Visits parameters in a fixed order with dotted names such as
    /// `enc0.stage1.conv.weight` or `gate2.psi.bias`.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &P)) {
        for (i, b) in self.encoders.iter().enumerate() {
            b.visit(&format!("enc{i}"), f);
        }
        self.bottleneck.visit("bottleneck", f);
        for (i, u) in self.upsamplers.iter().enumerate() {
            u.visit(&format!("up{i}"), f);
        }
        for (i, g) in self.gates.iter().enumerate() {
            g.visit(&format!("gate{i}"), f);
        }
        for (i, d) in self.decoders.iter().enumerate() {
            d.visit(&format!("dec{i}"), f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, b) in self.encoders.iter_mut().enumerate() {
            b.visit_mut(&format!("enc{i}"), f);
        }
        self.bottleneck.visit_mut("bottleneck", f);
        for (i, u) in self.upsamplers.iter_mut().enumerate() {
            u.visit_mut(&format!("up{i}"), f);
        }
        for (i, g) in self.gates.iter_mut().enumerate() {
            g.visit_mut(&format!("gate{i}"), f);
        }
        for (i, d) in self.decoders.iter_mut().enumerate() {
            d.visit_mut(&format!("dec{i}"), f);
        }
        self.head.visit_mut("head", f);
    }
}

/// Result of one recorded forward pass.
pub struct ForwardVars {
    pub output: Var,
    /// Attention coefficients per skip level, finest level first, at the
    /// padded resolution of that level.
    pub alphas: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    config: ModelConfig,
    params: UNetParams,
}

impl UNetModel {
    /// Builds the network with parameters drawn from a `seed`-determined stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (groups, eps, order) = (config.norm_groups, config.norm_epsilon, config.stage_order);
        let ch = |i| config.level_channels(i);

        let mut encoders = Vec::with_capacity(config.depth);
        let mut prev = config.in_channels;
        for i in 0..config.depth {
            encoders.push(DenseBlockParams::init(prev, config.growth, ch(i), groups, eps, order, &mut rng)?);
            prev = ch(i);
        }
        let bottleneck =
            DenseBlockParams::init(prev, config.growth, ch(config.depth), groups, eps, order, &mut rng)?;

        let mut upsamplers = Vec::with_capacity(config.depth);
        let mut gates = Vec::new();
        let mut decoders = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            upsamplers.push(Conv2dParams::init(2, 2, ch(i + 1), ch(i), 2, 0, &mut rng));
            if config.attention_enabled {
                gates.push(AttentionGateParams::init(
                    ch(i),
                    ch(i),
                    AttentionGateParams::default_mid(ch(i)),
                    &mut rng,
                ));
            }
            decoders.push(ConvBlock::init(2 * ch(i), ch(i), groups, eps, order, &mut rng)?);
        }
        let head = Conv2dParams::init(1, 1, ch(0), config.out_channels, 1, 0, &mut rng);

        Ok(Self {
            config,
            params: UNetParams { encoders, bottleneck, upsamplers, gates, decoders, head },
        })
    }

    /// Reassembles a model from named tensors, e.g. when loading a checkpoint.
    /// Names and shapes must match what [`UNetModel::new`] produces for `config`.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut expected = Vec::new();
        model.params.visit(&mut |name, t| expected.push((name.to_string(), t.shape().to_vec())));
        if expected.len() != tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {got_name:?} {:?} does not match expected {name:?} {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        model.params.visit_mut(&mut |_, slot| {
            let (_, t) = it.next().unwrap();
            *slot = t.with_grad();
        });
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &UNetParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut UNetParams {
        &mut self.params
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        let mut names = Vec::new();
        self.params.visit(&mut |n, _| names.push(n.to_string()));
        let mut refs: Vec<&Tensor<f32>> = Vec::new();
        collect_refs(&self.params, &mut refs);
        for (n, t) in names.into_iter().zip(refs) {
            out.push((n, t));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        collect_muts(&mut self.params, &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.params.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn zero_grad(&mut self) {
        self.params.visit_mut(&mut |_, t| t.zero_grad());
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> UNetParams<Var> {
        self.params.map(&mut binder(tape))
    }

    /// Records a forward pass of `x` (`(H, W, in_channels)`) with already-bound parameters.
    pub fn forward_bound<T: Real>(&self, tape: &mut Tape<T>, p: &UNetParams<Var>, x: Var) -> Result<ForwardVars> {
        let cfg = &self.config;
        let (h, w, c) = tape.value(x).hwc()?;
        if c != cfg.in_channels {
            return Err(mismatch("unet input", &[h, w, cfg.in_channels], tape.shape(x)));
        }
        let m = cfg.spatial_multiple();
        let margins = Margins::new(0, h.next_multiple_of(m) - h, 0, w.next_multiple_of(m) - w);
        let mut cur = tape.pad2d(x, margins)?;

        let mut skips = Vec::with_capacity(cfg.depth);
        for enc in &p.encoders {
            let e = nn::dense_block(tape, cur, enc)?;
            skips.push(e);
            cur = tape.avg_pool2d(e)?;
        }
        cur = nn::dense_block(tape, cur, &p.bottleneck)?;

        let mut alphas = Vec::with_capacity(p.gates.len());
        for level in (0..cfg.depth).rev() {
            let g = nn::conv_transpose2d(tape, cur, &p.upsamplers[level])?;
            let skip = match p.gates.get(level) {
                Some(gate) => {
                    let (gated, alpha) = nn::attention_gate(tape, skips[level], g, gate)?;
                    alphas.push(alpha);
                    gated
                }
                None => skips[level],
            };
            let merged = tape.concat_channels(&[skip, g])?;
            cur = nn::conv_block(tape, merged, &p.decoders[level])?;
        }
        alphas.reverse();

        let out = nn::conv2d(tape, cur, &p.head)?;
        let output = if margins == Margins::default() { out } else { tape.crop2d(out, margins)? };
        Ok(ForwardVars { output, alphas })
    }

    pub fn forward_tape<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<(UNetParams<Var>, ForwardVars)> {
        let p = self.bind(tape);
        let fv = self.forward_bound(tape, &p, x)?;
        Ok((p, fv))
    }

    /// Inference: `(H, W, in_channels)` to `(H, W, out_channels)`.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let p = self.params.map(&mut |t: &Tensor<f32>| tape.constant(t.cast()));
        let fv = self.forward_bound(&mut tape, &p, xv)?;
        Ok(tape.value(fv.output).clone())
    }

    /// Forward pass plus each gate's coefficient map, cropped to
    /// `ceil(H / 2^i) x ceil(W / 2^i)` at level `i`. Empty without attention.
    pub fn attention_maps(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        let (h, w, _) = x.hwc()?;
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let p = self.params.map(&mut |t: &Tensor<f32>| tape.constant(t.cast()));
        let fv = self.forward_bound(&mut tape, &p, xv)?;
        let mut maps = Vec::with_capacity(fv.alphas.len());
        for (level, &a) in fv.alphas.iter().enumerate() {
            let (ah, aw, _) = tape.value(a).hwc()?;
            let (th, tw) = (h.div_ceil(1 << level), w.div_ceil(1 << level));
            let m = Margins::new(0, ah - th, 0, aw - tw);
            let cropped = if m == Margins::default() { a } else { tape.crop2d(a, m)? };
            maps.push(tape.value(cropped).clone());
        }
        Ok((tape.value(fv.output).clone(), maps))
    }

    /// Adds the tape's gradients for `bound` into the stored parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<f32>, bound: &UNetParams<Var>) -> Result<()> {
        let mut vars = Vec::new();
        bound.visit(&mut |_, v| vars.push(*v));
        let mut it = vars.into_iter();
        let mut result = Ok(());
        self.params.visit_mut(&mut |_, t| {
            let v = it.next().unwrap();
            if let (Some(g), Ok(())) = (tape.grad(v), &result) {
                result = t.accumulate_grad(g);
            }
        });
        result
    }
}

fn collect_refs<'a>(p: &'a UNetParams, out: &mut Vec<&'a Tensor<f32>>) {
    fn conv<'a>(c: &'a Conv2dParams, out: &mut Vec<&'a Tensor<f32>>) {
        out.push(&c.weight);
        out.push(&c.bias);
    }
    fn stage<'a>(s: &'a nn::Stage, out: &mut Vec<&'a Tensor<f32>>) {
        conv(&s.conv, out);
        out.push(&s.norm.gamma);
        out.push(&s.norm.beta);
    }
    fn dense<'a>(d: &'a DenseBlockParams, out: &mut Vec<&'a Tensor<f32>>) {
        stage(&d.stage1, out);
        stage(&d.stage2, out);
        conv(&d.stage3, out);
    }
    p.encoders.iter().for_each(|b| dense(b, out));
    dense(&p.bottleneck, out);
    p.upsamplers.iter().for_each(|u| conv(u, out));
    for g in &p.gates {
        conv(&g.theta_x, out);
        conv(&g.theta_g, out);
        conv(&g.psi, out);
    }
    for d in &p.decoders {
        stage(&d.first, out);
        stage(&d.second, out);
    }
    conv(&p.head, out);
}

fn collect_muts<'a>(p: &'a mut UNetParams, out: &mut Vec<&'a mut Tensor<f32>>) {
    fn conv<'a>(c: &'a mut Conv2dParams, out: &mut Vec<&'a mut Tensor<f32>>) {
        out.push(&mut c.weight);
        out.push(&mut c.bias);
    }
    fn stage<'a>(s: &'a mut nn::Stage, out: &mut Vec<&'a mut Tensor<f32>>) {
        conv(&mut s.conv, out);
        out.push(&mut s.norm.gamma);
        out.push(&mut s.norm.beta);
    }
    fn dense<'a>(d: &'a mut DenseBlockParams, out: &mut Vec<&'a mut Tensor<f32>>) {
        stage(&mut d.stage1, out);
        stage(&mut d.stage2, out);
        conv(&mut d.stage3, out);
    }
    p.encoders.iter_mut().for_each(|b| dense(b, out));
    dense(&mut p.bottleneck, out);
    p.upsamplers.iter_mut().for_each(|u| conv(u, out));
    for g in &mut p.gates {
        conv(&mut g.theta_x, out);
        conv(&mut g.theta_g, out);
        conv(&mut g.psi, out);
    }
    for d in &mut p.decoders {
        stage(&mut d.first, out);
        stage(&mut d.second, out);
    }
    conv(&mut p.head, out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, ModelProbe};

    fn tiny(attention: bool) -> ModelConfig {
        ModelConfig {
            depth: 2,
            base_channels: 4,
            growth: 4,
            in_channels: 5,
            out_channels: 3,
            attention_enabled: attention,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig { stage_order: StageOrder::ConvNormRelu, norm_epsilon: 2.5e-6, ..tiny(false) };
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("depth=0").is_err());
        assert!(ModelConfig::from_text("colour=blue").is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = UNetModel::new(tiny(true), 3).unwrap();
        let b = UNetModel::new(tiny(true), 3).unwrap();
        let c = UNetModel::new(tiny(true), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.parameter_count() > 0);
    }

    #[test]
    fn attention_changes_count_not_shape() {
        let on = UNetModel::new(tiny(true), 1).unwrap();
        let off = UNetModel::new(tiny(false), 1).unwrap();
        let gate_params: usize = on
            .named_parameters()
            .iter()
            .filter(|(n, _)| n.starts_with("gate"))
            .map(|(_, t)| t.numel())
            .sum();
        assert!(gate_params > 0);
        assert_eq!(on.parameter_count(), off.parameter_count() + gate_params);
        let x = Tensor::randn(&[13, 10, 5], 2, 1.0).unwrap();
        assert_eq!(on.forward(&x).unwrap().shape(), &[13, 10, 3]);
        assert_eq!(off.forward(&x).unwrap().shape(), &[13, 10, 3]);
    }

    #[test]
    fn names_and_refs_line_up() {
        let m = UNetModel::new(tiny(true), 1).unwrap();
        let named = m.named_parameters();
        let mut visited = Vec::new();
        m.params().visit(&mut |n, t| visited.push((n.to_string(), t.shape().to_vec())));
        assert_eq!(named.len(), visited.len());
        for ((n, t), (vn, vs)) in named.iter().zip(&visited) {
            assert_eq!(n, vn);
            assert_eq!(t.shape(), vs.as_slice());
        }
        assert!(named.iter().any(|(n, _)| n == "gate1.psi.weight"));
        assert!(named.iter().any(|(n, _)| n == "enc0.stage1.norm.gamma"));
    }

    #[test]
    fn from_named_round_trip() {
        let m = UNetModel::new(tiny(true), 8).unwrap();
        let tensors = m.named_parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = UNetModel::from_named(tiny(true), tensors).unwrap();
        assert_eq!(back, m);
        let tensors: Vec<_> = m.named_parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert!(UNetModel::from_named(tiny(false), tensors).is_err());
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let m = UNetModel::new(tiny(true), 1).unwrap();
        let x = Tensor::randn(&[8, 8, 4], 2, 1.0).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn attention_maps_shapes() {
        let cfg = ModelConfig { depth: 4, ..tiny(true) };
        let mut m = UNetModel::new(cfg, 1).unwrap();
        let x = Tensor::randn(&[40, 24, 5], 2, 1.0).unwrap();
        let (_, maps) = m.attention_maps(&x).unwrap();
        let shapes: Vec<_> = maps.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, [[40, 24, 1], [20, 12, 1], [10, 6, 1], [5, 3, 1]]);
        assert!(maps.iter().all(|t| t.data().iter().all(|&a| a > 0.0 && a < 1.0)));

        for g in &mut m.params_mut().gates {
            g.psi.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, maps) = m.attention_maps(&x).unwrap();
        assert!(maps.iter().all(|t| t.data().iter().all(|&a| a == 0.5)));
    }

    #[test]
    fn end_to_end_gradient_wrt_input() {
        let m = UNetModel::new(ModelConfig { in_channels: 2, out_channels: 2, ..tiny(true) }, 5).unwrap();
        let x = Tensor::randn(&[32, 32, 2], 6, 1.0).unwrap();
        let r = finite_diff_check(&ModelProbe::wrt_input(&m, x.clone(), 99), &x, 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{} at {}", r.max_rel_error, r.worst_index);
    }

    #[test]
    fn end_to_end_gradient_wrt_parameters() {
        let m = UNetModel::new(tiny(true), 7).unwrap();
        let input = Tensor::randn(&[8, 8, 5], 8, 1.0).unwrap();
        for name in ["enc0.stage1.conv.weight", "bottleneck.stage2.norm.gamma", "up0.weight", "gate1.psi.weight", "gate0.theta_g.bias", "dec1.second.conv.bias", "head.weight"] {
            let f = ModelProbe::wrt_param(&m, input.clone(), name, 99).unwrap();
            let r = finite_diff_check(&f, &f.point(), 1e-6).unwrap();
            assert!(r.max_rel_error <= 1e-3, "{name}: {} at {}", r.max_rel_error, r.worst_index);
        }
    }

    #[test]
    fn saturated_gates_match_plain_unet() {
        let mut gated = UNetModel::new(tiny(true), 11).unwrap();
        for g in &mut gated.params_mut().gates {
            g.psi.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            g.psi.bias.data_mut().iter_mut().for_each(|v| *v = 20.0);
        }
        let kept = gated.named_parameters().into_iter().filter(|(n, _)| !n.starts_with("gate")).map(|(n, t)| (n, t.clone())).collect();
        let plain = UNetModel::from_named(tiny(false), kept).unwrap();
        let x = Tensor::randn(&[12, 20, 5], 3, 1.0).unwrap();
        let diff = gated.forward(&x).unwrap().max_abs_diff(&plain.forward(&x).unwrap()).unwrap();
        assert!(diff <= 1e-5, "{diff}");
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let mut m = UNetModel::new(tiny(true), 2).unwrap();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::randn(&[16, 16, 5], 1, 1.0).unwrap());
        let y = tape.constant(Tensor::randn(&[16, 16, 3], 2, 1.0).unwrap());
        let (p, fv) = m.forward_tape(&mut tape, x).unwrap();
        let loss = crate::training::mse_loss(&mut tape, fv.output, y).unwrap();
        tape.backward(loss).unwrap();
        m.accumulate_grads(&tape, &p).unwrap();
        for (name, t) in m.named_parameters() {
            let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().any(|&v| v != 0.0), "{name} gradient is zero");
        }
    }

    #[test]
    fn bottleneck_extent() {
        let cfg = ModelConfig { in_channels: 2, ..ModelConfig::default() };
        let m = UNetModel::new(cfg, 0).unwrap();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[495, 436, 2]).unwrap());
        // Only the contraction path is needed to check the lowest resolution.
        let p = m.bind(&mut tape);
        let m16 = m.config().spatial_multiple();
        let pad = Margins::new(0, 495usize.next_multiple_of(m16) - 495, 0, 436usize.next_multiple_of(m16) - 436);
        let mut cur = tape.pad2d(x, pad).unwrap();
        assert_eq!(tape.shape(cur), &[496, 448, 2]);
        for _ in &p.encoders {
            cur = tape.avg_pool2d(cur).unwrap();
        }
        assert_eq!(&tape.shape(cur)[..2], &[31, 28]);
    }
}
