//! Forward and backward kernels on plain tensors. The autodiff graph calls
//! into these; nothing here records history.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Over all `h * w` positions of each `(n, c)` plane.
    Spatial,
    /// Over channels at each `(n, h, w)` position.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    ChannelAvg,
    ChannelMax,
    SpatialMax2x2,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Self> {
        let (cout, cin, kh, kw) = (w.n(), w.c(), w.h(), w.w());
        if x.c() != cin {
            return Err(Error::shape("conv2d", x, w));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square with odd size, got weight {w}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if x.h() + 2 * pad < kh || x.w() + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("input {x} too small for weight {w} with pad {pad}"),
            ));
        }
        let ho = (x.h() + 2 * pad - kh) / stride + 1;
        let wo = (x.w() + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            cin,
            cout,
            k: kh,
            stride,
            pad,
            h: x.h(),
            w: x.w(),
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `0..w`, as a half-open range.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    // Largest ox with ox * stride + kx - pad <= w - 1.
    let hi = if g.w + g.pad < kx + 1 {
        0
    } else {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo)
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx);
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if hi > lo {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (o, v) in out_row[lo..hi]
                                .iter_mut()
                                .zip(src[first..].iter().step_by(g.stride))
                            {
                                *o = *v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx);
                let src = &col[row * cols..(row + 1) * cols];
                row += 1;
                if hi <= lo {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `c = a * b + beta * c` on row-major slices; `a` is `m x k`, `b` is `k x n`.
/// `ta` / `tb` read the operand as stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover every index reachable from the given
    // dimensions and strides (checked above in debug builds).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_bias(bias: Option<&Tensor>, cout: usize, weight: Shape) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape("conv2d bias", b.shape(), weight));
        }
    }
    Ok(())
}

/// Cross-correlation with zero padding.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    check_bias(bias, g.cout, weight.shape())?;
    let n = x.shape().n();
    let out_shape = Shape::new(n, g.cout, g.ho, g.wo);
    let mut out = Tensor::zeros(out_shape);
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.ho * g.wo;
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.col_cols()]
    };
    for s in 0..n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let os = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
        if let Some(b) = bias {
            for (c, &bv) in b.data().iter().enumerate() {
                os[c * g.ho * g.wo..(c + 1) * g.ho * g.wo].fill(bv);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        gemm(
            g.cout,
            g.col_rows(),
            g.col_cols(),
            weight.data(),
            false,
            src,
            false,
            1.0,
            os,
        );
    }
    Ok(out)
}

pub struct ConvGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    let n = x.shape().n();
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.ho * g.wo;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(Shape::new(1, g.cout, 1, 1));
    let rows = g.col_rows();
    let cols = g.col_cols();
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { rows * cols }];
    let mut dcol = vec![0.0; if need_input { rows * cols } else { 0 }];
    for s in 0..n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let dys = &dy.data()[s * out_per..(s + 1) * out_per];
        for c in 0..g.cout {
            db.data_mut()[c] += dys[c * cols..(c + 1) * cols].iter().sum::<f64>();
        }
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        // dW += dY * col^T
        gemm(g.cout, cols, rows, dys, false, src, true, 1.0, dw.data_mut());
        if !need_input {
            continue;
        }
        // dcol = W^T * dY
        gemm(rows, g.cout, cols, weight.data(), true, dys, false, 0.0, &mut dcol);
        let dxs = &mut dx.data_mut()[s * in_per..(s + 1) * in_per];
        if g.is_pointwise() {
            dxs.copy_from_slice(&dcol);
        } else {
            col2im(&dcol, &g, dxs);
        }
    }
    Ok(ConvGrads {
        input: need_input.then_some(dx),
        weight: dw,
        bias: db,
    })
}

/// Returns the pooled tensor and, for max pools, the flat input index that
/// won each output cell (ties go to the lowest index).
pub fn pool(x: &Tensor, kind: PoolKind) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    let [n, c, h, w] = s.0;
    match kind {
        PoolKind::ChannelAvg | PoolKind::ChannelMax => {
            if c == 0 {
                return Err(Error::invalid("pool", "channel pool over zero channels"));
            }
            let mut out = Tensor::zeros(Shape::new(n, 1, h, w));
            let mut arg = Vec::new();
            let hw = h * w;
            for b in 0..n {
                for p in 0..hw {
                    let base = b * c * hw + p;
                    let v = if kind == PoolKind::ChannelAvg {
                        (0..c).map(|k| x.data()[base + k * hw]).sum::<f64>() / c as f64
                    } else {
                        let mut best = base;
                        for k in 1..c {
                            if x.data()[base + k * hw] > x.data()[best] {
                                best = base + k * hw;
                            }
                        }
                        arg.push(best);
                        x.data()[best]
                    };
                    out.data_mut()[b * hw + p] = v;
                }
            }
            Ok((out, arg))
        }
        PoolKind::SpatialMax2x2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid(
                    "pool",
                    format!("2x2 max pool needs even spatial dims, got {s}"),
                ));
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut out = Tensor::zeros(Shape::new(n, c, ho, wo));
            let mut arg = Vec::with_capacity(out.len());
            let mut o = 0;
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = base + 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                        arg.push(best);
                        out.data_mut()[o] = x.data()[best];
                        o += 1;
                    }
                }
            }
            Ok((out, arg))
        }
    }
}

pub fn pool_backward(x_shape: Shape, kind: PoolKind, argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    match kind {
        PoolKind::ChannelAvg => {
            let [n, c, h, w] = x_shape.0;
            let hw = h * w;
            let inv = 1.0 / c as f64;
            for b in 0..n {
                for p in 0..hw {
                    let g = dy.data()[b * hw + p] * inv;
                    for k in 0..c {
                        dx.data_mut()[b * c * hw + k * hw + p] += g;
                    }
                }
            }
        }
        PoolKind::ChannelMax | PoolKind::SpatialMax2x2 => {
            for (&i, &g) in argmax.iter().zip(dy.data()) {
                dx.data_mut()[i] += g;
            }
        }
    }
    dx
}

/// Source taps for one output coordinate of a x2 align-corners-false
/// bilinear upsample: `(i0, i1, weight_of_i1)`.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_x2(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape().0;
    if h == 0 || w == 0 {
        return Err(Error::invalid("upsample", "empty spatial extent"));
    }
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = Tensor::zeros(Shape::new(n, c, 2 * h, 2 * w));
    let (ho, wo) = (2 * h, 2 * w);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_x2_backward(x_shape: Shape, dy: &Tensor) -> Tensor {
    let [n, c, h, w] = x_shape.0;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(x_shape);
    for plane in 0..n * c {
        let g = &dy.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                dst[y1 * w + x0] += v * ly * (1.0 - lx);
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    dx
}

/// Visit each softmax group as (start offset, element stride, length).
fn softmax_groups(s: Shape, axis: SoftmaxAxis, mut f: impl FnMut(usize, usize, usize)) {
    let [n, c, h, w] = s.0;
    let hw = h * w;
    match axis {
        SoftmaxAxis::Spatial => {
            for plane in 0..n * c {
                f(plane * hw, 1, hw);
            }
        }
        SoftmaxAxis::Channel => {
            for b in 0..n {
                for p in 0..hw {
                    f(b * c * hw + p, hw, c);
                }
            }
        }
    }
}

pub fn softmax(x: &Tensor, axis: SoftmaxAxis) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    softmax_groups(x.shape(), axis, |start, stride, len| {
        let idx = |i: usize| start + i * stride;
        let max = (0..len).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..len {
            let e = (xd[idx(i)] - max).exp();
            od[idx(i)] = e;
            total += e;
        }
        for i in 0..len {
            od[idx(i)] /= total;
        }
    });
    out
}

pub fn softmax_backward(y: &Tensor, axis: SoftmaxAxis, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), dy.data());
    let dd = dx.data_mut();
    softmax_groups(y.shape(), axis, |start, stride, len| {
        let idx = |i: usize| start + i * stride;
        let dot: f64 = (0..len).map(|i| yd[idx(i)] * gd[idx(i)]).sum();
        for i in 0..len {
            dd[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
        }
    });
    dx
}

/// Layer normalization across the channel axis at every `(n, h, w)`,
/// with per-channel affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape().0;
    if c == 0 {
        return Err(Error::invalid("layer_norm", "zero channels"));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for p in 0..hw {
            let base = b * c * hw + p;
            let (mean, inv_std) = moments(x.data(), base, hw, c);
            for k in 0..c {
                let xhat = (x.data()[base + k * hw] - mean) * inv_std;
                out.data_mut()[base + k * hw] = gamma.data()[k] * xhat + beta.data()[k];
            }
        }
    }
    Ok(out)
}

fn moments(d: &[f64], base: usize, stride: usize, c: usize) -> (f64, f64) {
    let mean = (0..c).map(|k| d[base + k * stride]).sum::<f64>() / c as f64;
    let var = (0..c)
        .map(|k| (d[base + k * stride] - mean).powi(2))
        .sum::<f64>()
        / c as f64;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub struct LayerNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn layer_norm_backward(x: &Tensor, gamma: &Tensor, dy: &Tensor) -> LayerNormGrads {
    let [n, c, h, w] = x.shape().0;
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dg = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    let cf = c as f64;
    for b in 0..n {
        for p in 0..hw {
            let base = b * c * hw + p;
            let (mean, inv_std) = moments(x.data(), base, hw, c);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for k in 0..c {
                let i = base + k * hw;
                let xhat = (x.data()[i] - mean) * inv_std;
                let g = dy.data()[i] * gamma.data()[k];
                sum_g += g;
                sum_gx += g * xhat;
                dg.data_mut()[k] += dy.data()[i] * xhat;
                dbeta.data_mut()[k] += dy.data()[i];
            }
            for k in 0..c {
                let i = base + k * hw;
                let xhat = (x.data()[i] - mean) * inv_std;
                let g = dy.data()[i] * gamma.data()[k];
                dx.data_mut()[i] = inv_std * (g - sum_g / cf - xhat * sum_gx / cf);
            }
        }
    }
    LayerNormGrads {
        input: dx,
        gamma: dg,
        beta: dbeta,
    }
}
