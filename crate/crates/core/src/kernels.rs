//! Slice-level forward/backward kernels for the spatial layers.
//!
//! All buffers are row-major `(H, W, C)`; weights are `(kH, kW, C_in, C_out)`.
//! Backward kernels accumulate into the gradient buffers they are given.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{gemm, MatRef, Real};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution; `None` if the output would be empty.
    pub fn conv(h: usize, w: usize, ci: usize, kh: usize, kw: usize, co: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(Self { h, w, ci, kh, kw, co, stride, pad, ho, wo })
    }

    /// Geometry of a transposed convolution: output is `(H-1)*s + k - 2*pad`.
    pub fn transposed(h: usize, w: usize, ci: usize, kh: usize, kw: usize, co: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h == 0 || w == 0 {
            return None;
        }
        let ho = ((h - 1) * stride + kh).checked_sub(2 * pad).filter(|&v| v > 0)?;
        let wo = ((w - 1) * stride + kw).checked_sub(2 * pad).filter(|&v| v > 0)?;
        Some(Self { h, w, ci, kh, kw, co, stride, pad, ho, wo })
    }

    fn k(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.wo * self.k()).max(1)).clamp(1, self.ho)
    }

    /// Input coordinate for an output coordinate and kernel offset.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, oy0: usize, oy1: usize, col: &mut Vec<T>) {
    let k = g.k();
    col.clear();
    col.resize((oy1 - oy0) * g.wo * k, T::zero());
    let mut r = 0;
    for oy in oy0..oy1 {
        for ox in 0..g.wo {
            let row = &mut col[r * k..(r + 1) * k];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let src = (iy * g.w + ix) * g.ci;
                    let dst = (ky * g.kw + kx) * g.ci;
                    row[dst..dst + g.ci].copy_from_slice(&x[src..src + g.ci]);
                }
            }
            r += 1;
        }
    }
}

fn col2im_add<T: Real>(dcol: &[T], g: &ConvGeom, oy0: usize, oy1: usize, dx: &mut [T]) {
    let k = g.k();
    let mut r = 0;
    for oy in oy0..oy1 {
        for ox in 0..g.wo {
            let row = &dcol[r * k..(r + 1) * k];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let dst = (iy * g.w + ix) * g.ci;
                    let src = (ky * g.kw + kx) * g.ci;
                    for (d, &s) in dx[dst..dst + g.ci].iter_mut().zip(&row[src..src + g.ci]) {
                        *d += s;
                    }
                }
            }
            r += 1;
        }
    }
}

fn fill_bias<T: Real>(out: &mut [T], bias: Option<&[T]>, co: usize) {
    match bias {
        Some(b) => out.chunks_exact_mut(co).for_each(|px| px.copy_from_slice(b)),
        None => out.iter_mut().for_each(|v| *v = T::zero()),
    }
}

fn add_bias_grad<T: Real>(dy: &[T], db: &mut [T]) {
    let co = db.len();
    for px in dy.chunks_exact(co) {
        for (d, &g) in db.iter_mut().zip(px) {
            *d += g;
        }
    }
}

/// Zero-padded copy of `x` with `pad` pixels on every side.
fn pad_input<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let mut xp = vec![T::zero(); hp * wp * g.ci];
    for y in 0..g.h {
        let dst = ((y + g.pad) * wp + g.pad) * g.ci;
        xp[dst..dst + g.w * g.ci].copy_from_slice(&x[y * g.w * g.ci..(y + 1) * g.w * g.ci]);
    }
    xp
}

/// Stride-1 convolution as one GEMM per kernel tap over the padded input.
///
/// Output row `r` of the intermediate lives at padded position `r`
/// (row `r / Wp`, column `r % Wp`); columns `>= Wo` are discarded.
fn shifted_rows(g: &ConvGeom) -> (usize, usize) {
    let wp = g.w + 2 * g.pad;
    (wp, (g.ho - 1) * wp + g.wo)
}

fn shifted_forward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom, out: &mut [T]) {
    let xp = pad_input(x, g);
    let (wp, m) = shifted_rows(g);
    let mut full = vec![T::zero(); m * g.co];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let t = ky * g.kw + kx;
            let off = (ky * wp + kx) * g.ci;
            let wt = &weight[t * g.ci * g.co..(t + 1) * g.ci * g.co];
            gemm(MatRef::row_major(&xp[off..off + m * g.ci], m, g.ci), MatRef::row_major(wt, g.ci, g.co), T::one(), &mut full);
        }
    }
    for oy in 0..g.ho {
        let src = &full[oy * wp * g.co..(oy * wp + g.wo) * g.co];
        for (d, &s) in out[oy * g.wo * g.co..(oy + 1) * g.wo * g.co].iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn shifted_backward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom, dy: &[T], dx: Option<&mut [T]>, dw: Option<&mut [T]>) {
    let (wp, m) = shifted_rows(g);
    let mut dfull = vec![T::zero(); m * g.co];
    for oy in 0..g.ho {
        dfull[oy * wp * g.co..(oy * wp + g.wo) * g.co].copy_from_slice(&dy[oy * g.wo * g.co..(oy + 1) * g.wo * g.co]);
    }
    let dm = MatRef::row_major(&dfull, m, g.co);
    if let Some(dw) = dw {
        let xp = pad_input(x, g);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let t = ky * g.kw + kx;
                let off = (ky * wp + kx) * g.ci;
                let dwt = &mut dw[t * g.ci * g.co..(t + 1) * g.ci * g.co];
                gemm(MatRef::transposed(&xp[off..off + m * g.ci], m, g.ci), dm, T::one(), dwt);
            }
        }
    }
    if let Some(dx) = dx {
        let mut dxp = vec![T::zero(); (g.h + 2 * g.pad) * wp * g.ci];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let t = ky * g.kw + kx;
                let off = (ky * wp + kx) * g.ci;
                let wt = &weight[t * g.ci * g.co..(t + 1) * g.ci * g.co];
                gemm(dm, MatRef::transposed(wt, g.ci, g.co), T::one(), &mut dxp[off..off + m * g.ci]);
            }
        }
        for y in 0..g.h {
            let src = &dxp[((y + g.pad) * wp + g.pad) * g.ci..((y + g.pad) * wp + g.pad + g.w) * g.ci];
            for (d, &s) in dx[y * g.w * g.ci..(y + 1) * g.w * g.ci].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.ho * g.wo * g.co];
    fill_bias(&mut out, bias, g.co);
    let wmat = MatRef::row_major(weight, g.k(), g.co);
    if g.is_pointwise() {
        gemm(MatRef::row_major(x, g.h * g.w, g.ci), wmat, T::one(), &mut out);
        return out;
    }
    if g.stride == 1 {
        shifted_forward(x, weight, g, &mut out);
        return out;
    }
    let step = g.rows_per_chunk();
    let mut col = Vec::new();
    let mut oy0 = 0;
    while oy0 < g.ho {
        let oy1 = (oy0 + step).min(g.ho);
        im2col(x, g, oy0, oy1, &mut col);
        let rows = (oy1 - oy0) * g.wo;
        let dst = &mut out[oy0 * g.wo * g.co..oy1 * g.wo * g.co];
        gemm(MatRef::row_major(&col, rows, g.k()), wmat, T::one(), dst);
        oy0 = oy1;
    }
    out
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    g: &ConvGeom,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(db) = db {
        add_bias_grad(dy, db);
    }
    let k = g.k();
    let wt = MatRef::transposed(weight, k, g.co);
    if g.is_pointwise() {
        let p = g.h * g.w;
        if let Some(dw) = dw {
            gemm(MatRef::transposed(x, p, g.ci), MatRef::row_major(dy, p, g.co), T::one(), dw);
        }
        if let Some(dx) = dx {
            gemm(MatRef::row_major(dy, p, g.co), wt, T::one(), dx);
        }
        return;
    }
    if g.stride == 1 {
        shifted_backward(x, weight, g, dy, dx, dw);
        return;
    }
    let (mut dx, mut dw) = (dx, dw);
    let step = g.rows_per_chunk();
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    let mut oy0 = 0;
    while oy0 < g.ho {
        let oy1 = (oy0 + step).min(g.ho);
        let rows = (oy1 - oy0) * g.wo;
        let dy_chunk = &dy[oy0 * g.wo * g.co..oy1 * g.wo * g.co];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(x, g, oy0, oy1, &mut col);
            gemm(MatRef::transposed(&col, rows, k), MatRef::row_major(dy_chunk, rows, g.co), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcol.clear();
            dcol.resize(rows * k, T::zero());
            gemm(MatRef::row_major(dy_chunk, rows, g.co), wt, T::zero(), &mut dcol);
            col2im_add(&dcol, g, oy0, oy1, dx);
        }
        oy0 = oy1;
    }
}

/// Output pixel written by input pixel `(iy, ix)` through tap `(ky, kx)`.
#[inline]
fn tap_target(g: &ConvGeom, iy: usize, ix: usize, ky: usize, kx: usize) -> Option<usize> {
    let oy = (iy * g.stride + ky).checked_sub(g.pad).filter(|&v| v < g.ho)?;
    let ox = (ix * g.stride + kx).checked_sub(g.pad).filter(|&v| v < g.wo)?;
    Some(oy * g.wo + ox)
}

pub fn conv_transpose2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.h * g.w;
    let mut out = vec![T::zero(); g.ho * g.wo * g.co];
    fill_bias(&mut out, bias, g.co);
    let xm = MatRef::row_major(x, p, g.ci);
    let mut tap = vec![T::zero(); p * g.co];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let t = ky * g.kw + kx;
            let wt = &weight[t * g.ci * g.co..(t + 1) * g.ci * g.co];
            gemm(xm, MatRef::row_major(wt, g.ci, g.co), T::zero(), &mut tap);
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let Some(o) = tap_target(g, iy, ix, ky, kx) else { continue };
                    let src = &tap[(iy * g.w + ix) * g.co..(iy * g.w + ix + 1) * g.co];
                    for (d, &s) in out[o * g.co..(o + 1) * g.co].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    g: &ConvGeom,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(db) = db {
        add_bias_grad(dy, db);
    }
    let (mut dx, mut dw) = (dx, dw);
    let p = g.h * g.w;
    let mut gathered = vec![T::zero(); p * g.co];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let t = ky * g.kw + kx;
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let dst = &mut gathered[(iy * g.w + ix) * g.co..(iy * g.w + ix + 1) * g.co];
                    match tap_target(g, iy, ix, ky, kx) {
                        Some(o) => dst.copy_from_slice(&dy[o * g.co..(o + 1) * g.co]),
                        None => dst.iter_mut().for_each(|v| *v = T::zero()),
                    }
                }
            }
            let gm = MatRef::row_major(&gathered, p, g.co);
            let wt = &weight[t * g.ci * g.co..(t + 1) * g.ci * g.co];
            if let Some(dx) = dx.as_deref_mut() {
                gemm(gm, MatRef::transposed(wt, g.ci, g.co), T::one(), dx);
            }
            if let Some(dw) = dw.as_deref_mut() {
                let dwt = &mut dw[t * g.ci * g.co..(t + 1) * g.ci * g.co];
                gemm(MatRef::transposed(x, p, g.ci), gm, T::one(), dwt);
            }
        }
    }
}

/// 2x2 mean pooling with stride 2; `h` and `w` must be even.
pub fn avg_pool2d_forward<T: Real>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                for (d, &v) in dst.iter_mut().zip(&x[s..s + c]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= quarter);
        }
    }
    out
}

pub fn avg_pool2d_backward<T: Real>(dy: &[T], h: usize, w: usize, c: usize, dx: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    for oy in 0..ho {
        for ox in 0..wo {
            let src = &dy[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for (dyy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let d = ((2 * oy + dyy) * w + 2 * ox + dxx) * c;
                for (t, &g) in dx[d..d + c].iter_mut().zip(src) {
                    *t += g * quarter;
                }
            }
        }
    }
}

/// Per-group `(mean, 1/sqrt(var + eps))` over all pixels and the group's channels.
pub fn group_norm_stats<T: Real>(x: &[T], c: usize, groups: usize, eps: f64) -> Vec<(T, T)> {
    let cg = c / groups;
    let n = (x.len() / c * cg) as f64;
    (0..groups)
        .map(|g| {
            let mut sum = 0.0;
            for px in x.chunks_exact(c) {
                sum += px[g * cg..(g + 1) * cg].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for px in x.chunks_exact(c) {
                sq += px[g * cg..(g + 1) * cg]
                    .iter()
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / n;
            (T::lit(mean), T::lit(1.0 / libm::sqrt(var + eps)))
        })
        .collect()
}

pub fn group_norm_forward<T: Real>(x: &[T], c: usize, gamma: &[T], beta: &[T], stats: &[(T, T)]) -> Vec<T> {
    let cg = c / stats.len();
    let mut out = vec![T::zero(); x.len()];
    for (px, o) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        for ch in 0..c {
            let (mean, rstd) = stats[ch / cg];
            o[ch] = gamma[ch] * (px[ch] - mean) * rstd + beta[ch];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    x: &[T],
    c: usize,
    gamma: &[T],
    stats: &[(T, T)],
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let groups = stats.len();
    let cg = c / groups;
    let pixels = x.len() / c;
    let xhat = |px: &[T], ch: usize| {
        let (mean, rstd) = stats[ch / cg];
        (px[ch] - mean) * rstd
    };
    if let Some(dgamma) = dgamma {
        let mut acc = vec![0.0f64; c];
        for (px, g) in x.chunks_exact(c).zip(dy.chunks_exact(c)) {
            for ch in 0..c {
                acc[ch] += (g[ch] * xhat(px, ch)).as_f64();
            }
        }
        dgamma.iter_mut().zip(acc).for_each(|(d, a)| *d += T::lit(a));
    }
    if let Some(dbeta) = dbeta {
        let mut acc = vec![0.0f64; c];
        for g in dy.chunks_exact(c) {
            for ch in 0..c {
                acc[ch] += g[ch].as_f64();
            }
        }
        dbeta.iter_mut().zip(acc).for_each(|(d, a)| *d += T::lit(a));
    }
    let Some(dx) = dx else { return };
    let n = (pixels * cg) as f64;
    let mut m1 = vec![0.0f64; groups];
    let mut m2 = vec![0.0f64; groups];
    for (px, g) in x.chunks_exact(c).zip(dy.chunks_exact(c)) {
        for ch in 0..c {
            let dxhat = (g[ch] * gamma[ch]).as_f64();
            m1[ch / cg] += dxhat;
            m2[ch / cg] += dxhat * xhat(px, ch).as_f64();
        }
    }
    let m1: Vec<T> = m1.into_iter().map(|v| T::lit(v / n)).collect();
    let m2: Vec<T> = m2.into_iter().map(|v| T::lit(v / n)).collect();
    for ((px, g), d) in x.chunks_exact(c).zip(dy.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
        for ch in 0..c {
            let grp = ch / cg;
            let rstd = stats[grp].1;
            d[ch] += rstd * (g[ch] * gamma[ch] - m1[grp] - xhat(px, ch) * m2[grp]);
        }
    }
}
