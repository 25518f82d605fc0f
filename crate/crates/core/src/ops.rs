//! Forward and backward kernels for every differentiable operation.
//!
//! These are plain functions over [`Tensor`]s. The eager executor calls the
//! forward halves directly; the [`Graph`](crate::graph::Graph) stores whatever
//! each backward half needs.
//!
//! Spatial operations accept `[C,H,W]` or `[N,C,H,W]` and keep the rank of
//! their input.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{contract, Result};
use crate::linalg::{gemm, Layout};
use crate::tensor::{spatial_dims, with_spatial, Tensor};

/// Output columns handled by one im2col block.
const CONV_BLOCK_COLS: usize = 4096;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BCE_CLAMP: f64 = 1e-7;

// ── convolution ─────────────────────────────────────────────────────

fn conv_shapes(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = spatial_dims("conv2d", input.shape())?;
    match *weight.shape() {
        [cout, wc, 3, 3] if wc == cin => Ok((n, cin, h, w, cout)),
        [_, wc, 3, 3] => Err(contract(
            "conv2d",
            format!("weight expects {wc} input channels, input has {cin}"),
        )),
        ref s => Err(contract("conv2d", format!("weight must be [C_out,C_in,3,3], got {s:?}"))),
    }
}

fn block_rows(h: usize, w: usize) -> usize {
    (CONV_BLOCK_COLS / w).clamp(1, h)
}

/// Fills `col` (`cin*9 × rows*w`) with the zero-padded 3×3 neighbourhoods of
/// output rows `y0..y0+rows`.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, y0: usize, rows: usize, col: &mut [f64]) {
    let ncols = rows * w;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for dy in 0..3 {
            for dx in 0..3 {
                let base = (c * 9 + dy * 3 + dx) * ncols;
                for r in 0..rows {
                    let dst = &mut col[base + r * w..base + (r + 1) * w];
                    let yy = (y0 + r + dy) as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[yy as usize * w..(yy as usize + 1) * w];
                    match dx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 3×3 convolution without bias on raw buffers.
fn conv3x3(x: &[f64], n: usize, cin: usize, h: usize, w: usize, weight: &[f64], cout: usize) -> Vec<f64> {
    let rows = block_rows(h, w);
    let tasks: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..h).step_by(rows).map(move |y0| (s, y0)))
        .collect();
    let k = cin * 9;
    let blocks: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(s, y0)| {
            let r = rows.min(h - y0);
            let ncols = r * w;
            let mut col = vec![0.0; k * ncols];
            im2col(&x[s * cin * h * w..(s + 1) * cin * h * w], cin, h, w, y0, r, &mut col);
            let mut out = vec![0.0; cout * ncols];
            gemm(
                cout,
                k,
                ncols,
                weight,
                Layout::row_major(k),
                &col,
                Layout::row_major(ncols),
                0.0,
                &mut out,
                Layout::row_major(ncols),
            );
            out
        })
        .collect();
    let mut out = vec![0.0; n * cout * h * w];
    for (&(s, y0), block) in tasks.iter().zip(&blocks) {
        let ncols = rows.min(h - y0) * w;
        for o in 0..cout {
            let dst = (s * cout + o) * h * w + y0 * w;
            out[dst..dst + ncols].copy_from_slice(&block[o * ncols..(o + 1) * ncols]);
        }
    }
    out
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is `[C_out,C_in,3,3]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, cin, h, w, cout) = conv_shapes(input, weight)?;
    if let Some(b) = bias {
        b.expect_shape("conv2d", &[cout])?;
    }
    let mut out = conv3x3(input.data(), n, cin, h, w, weight.data(), cout);
    if let Some(b) = bias {
        for (i, plane) in out.chunks_mut(h * w).enumerate() {
            let bv = b.data()[i % cout];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(Tensor::from_parts(with_spatial(input.shape(), cout, h, w), out))
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, w, cout) = conv_shapes(input, weight).expect("conv2d_backward shapes");
    let g = grad_out.data();

    // d_input is a convolution of the output gradient with the flipped,
    // channel-transposed kernel.
    let mut flipped = vec![0.0; cin * cout * 9];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..9 {
                flipped[(c * cout + o) * 9 + (8 - t)] = weight.data()[(o * cin + c) * 9 + t];
            }
        }
    }
    let d_input = conv3x3(g, n, cout, h, w, &flipped, cin);

    let k = cin * 9;
    let rows = block_rows(h, w);
    let tasks: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..h).step_by(rows).map(move |y0| (s, y0)))
        .collect();
    let partials: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(s, y0)| {
            let r = rows.min(h - y0);
            let ncols = r * w;
            let mut col = vec![0.0; k * ncols];
            im2col(&input.data()[s * cin * h * w..(s + 1) * cin * h * w], cin, h, w, y0, r, &mut col);
            let mut dw = vec![0.0; cout * k];
            let off = s * cout * h * w + y0 * w;
            gemm(
                cout,
                ncols,
                k,
                &g[off..],
                Layout { rs: h * w, cs: 1 },
                &col,
                Layout::transposed(ncols),
                0.0,
                &mut dw,
                Layout::row_major(k),
            );
            dw
        })
        .collect();
    let mut d_weight = vec![0.0; cout * k];
    for p in &partials {
        for (a, b) in d_weight.iter_mut().zip(p) {
            *a += *b;
        }
    }

    let mut d_bias = vec![0.0; cout];
    for (i, plane) in g.chunks(h * w).enumerate() {
        d_bias[i % cout] += plane.iter().sum::<f64>();
    }
    (
        Tensor::from_parts(input.shape().to_vec(), d_input),
        Tensor::from_parts(weight.shape().to_vec(), d_weight),
        Tensor::from_parts(vec![cout], d_bias),
    )
}

// ── pooling / resampling ────────────────────────────────────────────

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index that won (first in scan order on ties).
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = spatial_dims("maxpool2d", input.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(contract("maxpool2d", format!("spatial size {h}×{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(with_spatial(input.shape(), c, oh, ow), out), arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let d = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        d[i] += v;
    }
    g
}

/// Nearest-neighbour ×2 upsampling on both spatial axes.
pub fn upsample_nearest2(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = spatial_dims("upsample_nearest2", input.shape())?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Ok(Tensor::from_parts(with_spatial(input.shape(), c, 2 * h, 2 * w), out))
}

pub fn upsample_nearest2_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (n, c, h, w) = spatial_dims("upsample_nearest2", input_shape).expect("upsample shape");
    let g = grad_out.data();
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for x in 0..2 * w {
                out[p * h * w + (y / 2) * w + x / 2] += src[y * 2 * w + x];
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

// ── batch normalization ─────────────────────────────────────────────

/// Per-channel statistics gathered by a training-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BnBatch {
    pub mean: Vec<f64>,
    /// Biased variance (used for normalization).
    pub var: Vec<f64>,
    /// Number of elements each channel statistic was computed over.
    pub count: usize,
}

impl BnBatch {
    /// New running statistics after blending in this batch. The running
    /// variance tracks the unbiased estimate.
    pub fn blend(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        let unbias = if self.count > 1 {
            self.count as f64 / (self.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * self.mean[c];
            running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * self.var[c] * unbias;
        }
    }
}

fn bn_check(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = spatial_dims("batchnorm2d", input.shape())?;
    gamma.expect_shape("batchnorm2d", &[c])?;
    beta.expect_shape("batchnorm2d", &[c])?;
    Ok((n, c, h * w))
}

fn bn_apply(input: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], inv_std: &[f64], n: usize, c: usize, hw: usize) -> Tensor {
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            let (g, b, m, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in off..off + hw {
                out[i] = g * (x[i] - m) * is + b;
            }
        }
    }
    Tensor::from_parts(input.shape().to_vec(), out)
}

/// Training-mode batchnorm: normalizes with statistics over `N×H×W`.
pub fn batchnorm2d_train(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, BnBatch)> {
    let (n, c, hw) = bn_check(input, gamma, beta)?;
    let x = input.data();
    let count = n * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for smp in 0..n {
            let off = (smp * c + ch) * hw;
            s += x[off..off + hw].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for smp in 0..n {
            let off = (smp * c + ch) * hw;
            v += x[off..off + hw].iter().map(|&a| (a - m) * (a - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let out = bn_apply(input, gamma, beta, &mean, &inv_std, n, c, hw);
    Ok((out, BnBatch { mean, var, count }))
}

/// Eval-mode batchnorm with stored running statistics.
pub fn batchnorm2d_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    let (n, c, hw) = bn_check(input, gamma, beta)?;
    running_mean.expect_shape("batchnorm2d", &[c])?;
    running_var.expect_shape("batchnorm2d", &[c])?;
    let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    Ok(bn_apply(input, gamma, beta, running_mean.data(), &inv_std, n, c, hw))
}

/// Gradients of training-mode batchnorm: `(d_input, d_gamma, d_beta)`.
pub fn batchnorm2d_train_backward(
    input: &Tensor,
    gamma: &Tensor,
    batch: &BnBatch,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = spatial_dims("batchnorm2d", input.shape()).expect("bn shape");
    let hw = h * w;
    let m = (n * hw) as f64;
    let (x, g) = (input.data(), grad_out.data());
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let mean = batch.mean[ch];
        let is = 1.0 / (batch.var[ch] + BN_EPS).sqrt();
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let xhat = (x[i] - mean) * is;
                sum_g += g[i];
                sum_gx += g[i] * xhat;
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let gm = gamma.data()[ch];
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let xhat = (x[i] - mean) * is;
                dx[i] = gm * is / m * (m * g[i] - sum_g - xhat * sum_gx);
            }
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Gradients of eval-mode batchnorm (running statistics are constants).
pub fn batchnorm2d_eval_backward(
    input: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = spatial_dims("batchnorm2d", input.shape()).expect("bn shape");
    let hw = h * w;
    let (x, g) = (input.data(), grad_out.data());
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let is = 1.0 / (running_var.data()[ch] + BN_EPS).sqrt();
        let mean = running_mean.data()[ch];
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = g[i] * gamma.data()[ch] * is;
                dgamma[ch] += g[i] * (x[i] - mean) * is;
                dbeta[ch] += g[i];
            }
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

// ── elementwise ─────────────────────────────────────────────────────

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Largest f64 below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Clamped so that saturated inputs still land strictly inside (0, 1).
pub fn sigmoid_scalar(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(|v| v.tanh().clamp(-BELOW_ONE, BELOW_ONE))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Ok(a.zip_map(b, |x, y| x + y))
}

/// Residual attention: `(1 + mask) ⊙ features`.
pub fn attend(features: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape("attend", features, mask)?;
    Ok(features.zip_map(mask, |f, m| (1.0 + m) * f))
}

// ── sequence helpers ────────────────────────────────────────────────

/// Mean over the frequency axis followed by a move to time-major layout:
/// `[N,C,T,D] -> [N,T,C]` (or `[C,T,D] -> [T,C]`).
pub fn temporal_collapse(input: &Tensor) -> Result<Tensor> {
    let (n, c, t, d) = spatial_dims("temporal_collapse", input.shape())?;
    let x = input.data();
    let mut out = vec![0.0; n * t * c];
    for s in 0..n {
        for ch in 0..c {
            for ti in 0..t {
                let off = ((s * c + ch) * t + ti) * d;
                out[(s * t + ti) * c + ch] = x[off..off + d].iter().sum::<f64>() / d as f64;
            }
        }
    }
    let shape = if input.rank() == 3 { vec![t, c] } else { vec![n, t, c] };
    Ok(Tensor::from_parts(shape, out))
}

pub fn temporal_collapse_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (n, c, t, d) = spatial_dims("temporal_collapse", input_shape).expect("collapse shape");
    let g = grad_out.data();
    let mut out = vec![0.0; n * c * t * d];
    for s in 0..n {
        for ch in 0..c {
            for ti in 0..t {
                let v = g[(s * t + ti) * c + ch] / d as f64;
                let off = ((s * c + ch) * t + ti) * d;
                out[off..off + d].fill(v);
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// Concatenates two tensors along their last axis.
pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra != rb || a.shape()[..ra - 1] != b.shape()[..rb - 1] {
        return Err(contract(
            "concat_last",
            format!("leading dims differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (wa, wb) = (a.shape()[ra - 1], b.shape()[rb - 1]);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra_, rb_) in a.data().chunks(wa).zip(b.data().chunks(wb)) {
        out.extend_from_slice(ra_);
        out.extend_from_slice(rb_);
    }
    let mut shape = a.shape().to_vec();
    shape[ra - 1] = wa + wb;
    Ok(Tensor::from_parts(shape, out))
}

pub fn concat_last_backward(a_shape: &[usize], b_shape: &[usize], grad_out: &Tensor) -> (Tensor, Tensor) {
    let wa = *a_shape.last().unwrap();
    let wb = *b_shape.last().unwrap();
    let mut ga = Vec::with_capacity(a_shape.iter().product());
    let mut gb = Vec::with_capacity(b_shape.iter().product());
    for row in grad_out.data().chunks(wa + wb) {
        ga.extend_from_slice(&row[..wa]);
        gb.extend_from_slice(&row[wa..]);
    }
    (
        Tensor::from_parts(a_shape.to_vec(), ga),
        Tensor::from_parts(b_shape.to_vec(), gb),
    )
}

// ── dense layers ────────────────────────────────────────────────────

fn linear_rows(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let nin = *input.shape().last().unwrap();
    match *weight.shape() {
        [nout, wi] if wi == nin => Ok((input.len() / nin, nin, nout)),
        ref s => Err(contract(
            "linear",
            format!("weight {s:?} does not accept inputs of width {nin}"),
        )),
    }
}

/// Row-wise affine map over the last axis: `y = x·Wᵀ + b` with `W: [out,in]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, nin, nout) = linear_rows(input, weight)?;
    bias.expect_shape("linear", &[nout])?;
    let mut out = Vec::with_capacity(rows * nout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm(
        rows,
        nin,
        nout,
        input.data(),
        Layout::row_major(nin),
        weight.data(),
        Layout::transposed(nin),
        1.0,
        &mut out,
        Layout::row_major(nout),
    );
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = nout;
    Ok(Tensor::from_parts(shape, out))
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (rows, nin, nout) = linear_rows(input, weight).expect("linear shapes");
    let g = grad_out.data();
    let mut dx = vec![0.0; rows * nin];
    gemm(rows, nout, nin, g, Layout::row_major(nout), weight.data(), Layout::row_major(nin), 0.0, &mut dx, Layout::row_major(nin));
    let mut dw = vec![0.0; nout * nin];
    gemm(nout, rows, nin, g, Layout::transposed(nout), input.data(), Layout::row_major(nin), 0.0, &mut dw, Layout::row_major(nin));
    let mut db = vec![0.0; nout];
    for row in g.chunks(nout) {
        for (a, b) in db.iter_mut().zip(row) {
            *a += *b;
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(weight.shape().to_vec(), dw),
        Tensor::from_parts(vec![nout], db),
    )
}

// ── regularization and loss ─────────────────────────────────────────

/// Inverted dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1/(1-rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(contract("dropout", format!("rate {rate} outside [0,1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Training-mode dropout. Eval mode is the identity and needs no call.
pub fn dropout(input: &Tensor, rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.shape(), rate, rng)?;
    Ok(input.zip_map(&mask, |a, b| a * b))
}

fn check_targets(pred: &Tensor, target: &Tensor) -> Result<()> {
    same_shape("bce_loss", pred, target)?;
    if let Some(bad) = target.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(contract("bce_loss", format!("target value {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1-1e-7]`.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_targets(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n)
}

/// Gradient of [`bce_loss`] w.r.t. `pred`, scaled by `upstream`. Uses the
/// clamped prediction so saturated outputs still receive a signal.
pub fn bce_loss_backward(pred: &Tensor, target: &Tensor, upstream: f64) -> Tensor {
    let n = pred.len() as f64;
    pred.zip_map(target, |p, y| {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        upstream * (-y / p + (1.0 - y) / (1.0 - p)) / n
    })
}
