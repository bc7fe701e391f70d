//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the inputs
//! needed by its gradient rule. Nodes are stored in execution order, so the
//! tape is topologically sorted by construction and [`Tape::backward`] walks
//! it once in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{mismatch, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero-padding or cropping margins for `(H, W, C)` tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Margins {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Margins {
    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self { top, bottom, left, right }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var, bool),
    Sub(Var, Var),
    Mul(Var, Var, bool),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    SumAll(Var),
    MeanAll(Var),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    Pad(Var, Margins),
    Crop(Var, Margins),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool2d(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn pad_hwc<T: Real>(x: &[T], h: usize, w: usize, c: usize, m: Margins) -> Vec<T> {
    let wp = w + m.left + m.right;
    let mut out = vec![T::zero(); (h + m.top + m.bottom) * wp * c];
    for y in 0..h {
        let dst = ((y + m.top) * wp + m.left) * c;
        out[dst..dst + w * c].copy_from_slice(&x[y * w * c..(y + 1) * w * c]);
    }
    out
}

fn crop_hwc<T: Real>(x: &[T], w: usize, c: usize, m: Margins, ho: usize, wo: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        let src = ((y + m.top) * w + m.left) * c;
        out.extend_from_slice(&x[src..src + wo * c]);
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are collected for it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn hwc(&self, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v).hwc()
    }

    /// `true` if `b` matches `a` exactly, `false` if `b` is `a` with a
    /// trailing singleton axis; any other pairing is an error.
    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        let n = sa.len();
        if sb.len() == n && sb[n - 1] == 1 && sa[..n - 1] == sb[..n - 1] {
            return Ok(true);
        }
        Err(mismatch(op, sa, sb))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T, bcast_ok: bool) -> Result<(Tensor<T>, bool)> {
        let bcast = self.broadcast_kind(op, a, b)?;
        if bcast && !bcast_ok {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let f = &f;
        let data: Vec<T> = if bcast {
            let c = *va.shape().last().unwrap();
            va.data()
                .chunks_exact(c)
                .zip(vb.data())
                .flat_map(|(px, &s)| px.iter().map(move |&x| f(x, s)))
                .collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok((Tensor::from_vec(va.shape(), data)?, bcast))
    }

    /// Elementwise sum; `b` may carry a trailing singleton channel.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "add", |x, y| x + y, true)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b, bc), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "sub", |x, y| x - y, false)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product; `b` may carry a trailing singleton channel.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "mul", |x, y| x * y, true)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b, bc), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let t = Tensor::from_vec(va.shape(), va.data().iter().map(|&x| x * s).collect()).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let t = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let t = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(T::lit(s)), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s: f64 = va.data().iter().map(|v| v.as_f64()).sum();
        let m = s / va.numel() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(T::lit(m)), Op::MeanAll(a), ng)
    }

    /// Concatenates `(H, W, C_i)` tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels needs at least one part".into()))?;
        let (h, w, _) = self.hwc(first)?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ph, pw, pc) = self.hwc(p)?;
            if (ph, pw) != (h, w) {
                return Err(mismatch("concat_channels", self.shape(first), self.shape(p)));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (&p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&self.value(p).data()[px * c..(px + 1) * c]);
            }
        }
        let t = Tensor::from_vec(&[h, w, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).slice_channels(start, len)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::SliceChannels(a, start), ng))
    }

    pub fn pad2d(&mut self, a: Var, m: Margins) -> Result<Var> {
        let (h, w, c) = self.hwc(a)?;
        let data = pad_hwc(self.value(a).data(), h, w, c, m);
        let t = Tensor::from_vec(&[h + m.top + m.bottom, w + m.left + m.right, c], data)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Pad(a, m), ng))
    }

    pub fn crop2d(&mut self, a: Var, m: Margins) -> Result<Var> {
        let (h, w, c) = self.hwc(a)?;
        if m.top + m.bottom >= h || m.left + m.right >= w {
            return Err(Error::InvalidArgument(format!(
                "crop {:?} does not fit inside {}x{}",
                m, h, w
            )));
        }
        let (ho, wo) = (h - m.top - m.bottom, w - m.left - m.right);
        let data = crop_hwc(self.value(a).data(), w, c, m, ho, wo);
        let t = Tensor::from_vec(&[ho, wo, c], data)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Crop(a, m), ng))
    }

    fn conv_operands(&self, op: &'static str, x: Var, w: Var, b: Option<Var>) -> Result<((usize, usize, usize), (usize, usize, usize, usize))> {
        let xs = self.hwc(x)?;
        let ws = match self.shape(w) {
            &[kh, kw, ci, co] => (kh, kw, ci, co),
            other => return Err(mismatch(op, &[0, 0, xs.2, 0], other)),
        };
        if ws.2 != xs.2 {
            return Err(mismatch(op, self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws.3] {
                return Err(mismatch(op, self.shape(w), self.shape(b)));
            }
        }
        Ok((xs, ws))
    }

    /// Cross-correlation of `x (H, W, C_in)` with `w (kH, kW, C_in, C_out)` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let ((h, wd, ci), (kh, kw, _, co)) = self.conv_operands("conv2d", x, w, b)?;
        let geom = ConvGeom::conv(h, wd, ci, kh, kw, co, stride, padding).ok_or_else(|| {
            Error::InvalidArgument(format!("conv2d: {kh}x{kw} kernel, stride {stride}, pad {padding} on {h}x{wd}"))
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::from_vec(&[geom.ho, geom.wo, co], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Transposed convolution with weights `(kH, kW, C_in, C_out)`; `C_in`
    /// is the channel count of `x`. Output extent is `(H-1)*stride + k - 2*padding`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let ((h, wd, ci), (kh, kw, _, co)) = self.conv_operands("conv_transpose2d", x, w, b)?;
        let geom = ConvGeom::transposed(h, wd, ci, kh, kw, co, stride, padding).ok_or_else(|| {
            Error::InvalidArgument(format!("conv_transpose2d: stride {stride}, pad {padding}"))
        })?;
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::from_vec(&[geom.ho, geom.wo, co], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, ng))
    }

    /// 2x2 average pooling, stride 2.
    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.hwc(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape(self.shape(x).to_vec()));
        }
        let out = kernels::avg_pool2d_forward(self.value(x).data(), h, w, c);
        let t = Tensor::from_vec(&[h / 2, w / 2, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::AvgPool2d(x), ng))
    }

    /// Group normalization over one example: statistics per channel group
    /// across all pixels, then a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (h, w, c) = self.hwc(x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument(format!("{c} channels not divisible into {groups} groups")));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("group_norm epsilon must be positive, got {eps}")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("group_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let stats = kernels::group_norm_stats(xv, c, groups, eps);
        let out = kernels::group_norm_forward(xv, c, self.value(gamma).data(), self.value(beta).data(), &stats);
        let t = Tensor::from_vec(&[h, w, c], out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::GroupNorm { x, gamma, beta, stats }, ng))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to the grad
    /// buffers of every reachable leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&g)?;
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    reduce_into(gb, g, *bc, |s, _| s, None);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    if *bc {
                        let c = ga.len() / vb.len();
                        for ((d, gs), &s) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(vb) {
                            d.iter_mut().zip(gs).for_each(|(d, &gv)| *d += gv * s);
                        }
                    } else {
                        ga.iter_mut().zip(g).zip(vb).for_each(|((d, &gv), &y)| *d += gv * y);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    reduce_into(gb, g, *bc, |gv, x| gv * x, Some(va));
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *s);
                }
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let s = g[0] / T::lit(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = *nodes[p.0].value.shape().last().unwrap();
                    if let Some(gp) = slot(nodes, grads, p) {
                        for (d, gs) in gp.chunks_exact_mut(c).zip(g.chunks_exact(total)) {
                            d.iter_mut().zip(&gs[offset..offset + c]).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceChannels(a, start) => {
                let c = *nodes[a.0].value.shape().last().unwrap();
                let len = *node.value.shape().last().unwrap();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (d, gs) in ga.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        d[*start..*start + len].iter_mut().zip(gs).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Pad(a, m) => {
                let (h, w, c) = nodes[a.0].value.hwc().unwrap();
                let wp = node.value.shape()[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    let inner = crop_hwc(g, wp, c, *m, h, w);
                    ga.iter_mut().zip(&inner).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Crop(a, m) => {
                let (ho, wo, c) = node.value.hwc().unwrap();
                if let Some(ga) = slot(nodes, grads, *a) {
                    let full = pad_hwc(g, ho, wo, c, *m);
                    ga.iter_mut().zip(&full).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Conv2d { x, w, b, geom } | Op::ConvTranspose2d { x, w, b, geom } => {
                let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                // Each input has its own buffer; take them out to satisfy the borrow checker.
                let mut gx = take_slot(nodes, grads, *x);
                let mut gw = take_slot(nodes, grads, *w);
                let mut gb = b.and_then(|b| take_slot(nodes, grads, b));
                let transposed = matches!(node.op, Op::ConvTranspose2d { .. });
                let f = if transposed {
                    kernels::conv_transpose2d_backward::<T>
                } else {
                    kernels::conv2d_backward::<T>
                };
                f(xv, wv, geom, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                put_slot(grads, *x, gx);
                put_slot(grads, *w, gw);
                if let Some(b) = b {
                    put_slot(grads, *b, gb);
                }
            }
            Op::AvgPool2d(a) => {
                let (h, w, c) = nodes[a.0].value.hwc().unwrap();
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::avg_pool2d_backward(g, h, w, c, ga);
                }
            }
            Op::GroupNorm { x, gamma, beta, stats } => {
                let xv = nodes[x.0].value.data();
                let c = *nodes[x.0].value.shape().last().unwrap();
                let gv = nodes[gamma.0].value.data();
                let mut gx = take_slot(nodes, grads, *x);
                let mut gg = take_slot(nodes, grads, *gamma);
                let mut gbeta = take_slot(nodes, grads, *beta);
                kernels::group_norm_backward(xv, c, gv, stats, g, gx.as_deref_mut(), gg.as_deref_mut(), gbeta.as_deref_mut());
                put_slot(grads, *x, gx);
                put_slot(grads, *gamma, gg);
                put_slot(grads, *beta, gbeta);
            }
        }
    }
}

/// The (lazily zeroed) gradient buffer of an input that needs one.
fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
}

fn take_slot<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]))
}

fn put_slot<T>(grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
    if buf.is_some() {
        grads[v.0] = buf;
    }
}

/// Adds `f(g, other)` into `dst`, summing over the channel axis when `dst`
/// is the singleton-channel operand of a broadcast.
fn reduce_into<T: Real>(dst: &mut [T], g: &[T], bcast: bool, f: impl Fn(T, T) -> T, other: Option<&[T]>) {
    let pick = |i: usize| other.map_or(T::one(), |o| o[i]);
    if bcast {
        let c = g.len() / dst.len();
        for (p, d) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for k in p * c..(p + 1) * c {
                acc += f(g[k], pick(k));
            }
            *d += acc;
        }
    } else {
        for (k, d) in dst.iter_mut().enumerate() {
            *d += f(g[k], pick(k));
        }
    }
}
