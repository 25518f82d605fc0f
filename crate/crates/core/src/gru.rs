//! Single-direction GRU layer over a batch of sequences, with a fused
//! backpropagation-through-time backward pass.
//!
//! Gate layout follows the common `[r | z | n]` stacking:
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use crate::error::{contract, Result};
use crate::linalg::{gemm, Layout};
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;

/// Processing order of a GRU layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Borrowed GRU weights: `w_ih [3H,In]`, `w_hh [3H,H]`, `b_ih [3H]`, `b_hh [3H]`.
#[derive(Clone, Copy)]
pub struct GruWeights<'a> {
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub b_ih: &'a Tensor,
    pub b_hh: &'a Tensor,
}

/// Activations saved by the forward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    n: usize,
    t: usize,
    hidden: usize,
    // Per step (in processing order), each `n × hidden`.
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    cand: Vec<f64>,
    hh_n: Vec<f64>,
}

fn dims(input: &Tensor, w: &GruWeights) -> Result<(usize, usize, usize, usize)> {
    let (n, t, nin) = match *input.shape() {
        [t, i] => (1, t, i),
        [n, t, i] => (n, t, i),
        ref s => return Err(contract("gru_layer", format!("expected [T,In] or [N,T,In], got {s:?}"))),
    };
    let hidden = match *w.w_hh.shape() {
        [g, h] if g == 3 * h => h,
        ref s => return Err(contract("gru_layer", format!("w_hh must be [3H,H], got {s:?}"))),
    };
    w.w_ih.expect_shape("gru_layer", &[3 * hidden, nin])?;
    w.b_ih.expect_shape("gru_layer", &[3 * hidden])?;
    w.b_hh.expect_shape("gru_layer", &[3 * hidden])?;
    Ok((n, t, nin, hidden))
}

fn time_index(step: usize, t: usize, dir: Direction) -> usize {
    match dir {
        Direction::Forward => step,
        Direction::Backward => t - 1 - step,
    }
}

/// Runs the layer from a zero initial state. Output has the input's leading
/// shape with width `H`; a backward layer's output is re-aligned to the
/// original time order.
pub fn gru_layer(input: &Tensor, w: GruWeights, dir: Direction) -> Result<(Tensor, GruCache)> {
    let (n, t, nin, hd) = dims(input, &w)?;
    let g3 = 3 * hd;

    // Input contributions for every (sample, time) row at once.
    let mut xg = Vec::with_capacity(n * t * g3);
    for _ in 0..n * t {
        xg.extend_from_slice(w.b_ih.data());
    }
    gemm(n * t, nin, g3, input.data(), Layout::row_major(nin), w.w_ih.data(), Layout::transposed(nin), 1.0, &mut xg, Layout::row_major(g3));

    let mut cache = GruCache {
        n,
        t,
        hidden: hd,
        h_prev: Vec::with_capacity(t * n * hd),
        r: Vec::with_capacity(t * n * hd),
        z: Vec::with_capacity(t * n * hd),
        cand: Vec::with_capacity(t * n * hd),
        hh_n: Vec::with_capacity(t * n * hd),
    };
    let mut out = vec![0.0; n * t * hd];
    let mut h = vec![0.0; n * hd];
    let mut hg = vec![0.0; n * g3];
    for step in 0..t {
        let ti = time_index(step, t, dir);
        for row in hg.chunks_mut(g3) {
            row.copy_from_slice(w.b_hh.data());
        }
        gemm(n, hd, g3, &h, Layout::row_major(hd), w.w_hh.data(), Layout::transposed(hd), 1.0, &mut hg, Layout::row_major(g3));
        cache.h_prev.extend_from_slice(&h);
        for s in 0..n {
            let xrow = &xg[(s * t + ti) * g3..(s * t + ti + 1) * g3];
            let hrow = &hg[s * g3..(s + 1) * g3];
            for j in 0..hd {
                let r = sigmoid_scalar(xrow[j] + hrow[j]);
                let z = sigmoid_scalar(xrow[hd + j] + hrow[hd + j]);
                let hn = hrow[2 * hd + j];
                let cand = (xrow[2 * hd + j] + r * hn).tanh();
                let hp = h[s * hd + j];
                let hnew = (1.0 - z) * cand + z * hp;
                cache.r.push(r);
                cache.z.push(z);
                cache.cand.push(cand);
                cache.hh_n.push(hn);
                h[s * hd + j] = hnew;
                out[(s * t + ti) * hd + j] = hnew;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = hd;
    Ok((Tensor::from_parts(shape, out), cache))
}

/// Gradients of [`gru_layer`]: `(d_input, d_w_ih, d_w_hh, d_b_ih, d_b_hh)`.
pub fn gru_layer_backward(
    input: &Tensor,
    w: GruWeights,
    dir: Direction,
    cache: &GruCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
    let (n, t, hd) = (cache.n, cache.t, cache.hidden);
    let nin = *input.shape().last().unwrap();
    let g3 = 3 * hd;
    let go = grad_out.data();

    let mut dxg = vec![0.0; n * t * g3];
    let mut dhg = vec![0.0; n * g3];
    let mut dh = vec![0.0; n * hd];
    let mut dh_next = vec![0.0; n * hd];
    let mut dw_hh = vec![0.0; g3 * hd];
    let mut db_hh = vec![0.0; g3];
    for step in (0..t).rev() {
        let ti = time_index(step, t, dir);
        let base = step * n * hd;
        for s in 0..n {
            for j in 0..hd {
                let k = s * hd + j;
                let g = go[(s * t + ti) * hd + j] + dh[k];
                let (r, z, c, hn, hp) = (
                    cache.r[base + k],
                    cache.z[base + k],
                    cache.cand[base + k],
                    cache.hh_n[base + k],
                    cache.h_prev[base + k],
                );
                let dc = g * (1.0 - z) * (1.0 - c * c);
                let dz = g * (hp - c) * z * (1.0 - z);
                let dr = dc * hn * r * (1.0 - r);
                dh_next[k] = g * z;
                let xrow = &mut dxg[(s * t + ti) * g3..(s * t + ti + 1) * g3];
                xrow[j] = dr;
                xrow[hd + j] = dz;
                xrow[2 * hd + j] = dc;
                let hrow = &mut dhg[s * g3..(s + 1) * g3];
                hrow[j] = dr;
                hrow[hd + j] = dz;
                hrow[2 * hd + j] = dc * r;
            }
        }
        let h_prev = &cache.h_prev[base..base + n * hd];
        gemm(g3, n, hd, &dhg, Layout::transposed(g3), h_prev, Layout::row_major(hd), 1.0, &mut dw_hh, Layout::row_major(hd));
        for row in dhg.chunks(g3) {
            for (a, b) in db_hh.iter_mut().zip(row) {
                *a += *b;
            }
        }
        gemm(n, g3, hd, &dhg, Layout::row_major(g3), w.w_hh.data(), Layout::row_major(hd), 1.0, &mut dh_next, Layout::row_major(hd));
        std::mem::swap(&mut dh, &mut dh_next);
    }

    let mut dx = vec![0.0; n * t * nin];
    gemm(n * t, g3, nin, &dxg, Layout::row_major(g3), w.w_ih.data(), Layout::row_major(nin), 0.0, &mut dx, Layout::row_major(nin));
    let mut dw_ih = vec![0.0; g3 * nin];
    gemm(g3, n * t, nin, &dxg, Layout::transposed(g3), input.data(), Layout::row_major(nin), 0.0, &mut dw_ih, Layout::row_major(nin));
    let mut db_ih = vec![0.0; g3];
    for row in dxg.chunks(g3) {
        for (a, b) in db_ih.iter_mut().zip(row) {
            *a += *b;
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(vec![g3, nin], dw_ih),
        Tensor::from_parts(vec![g3, hd], dw_hh),
        Tensor::from_parts(vec![g3], db_ih),
        Tensor::from_parts(vec![g3], db_hh),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_weights(nin: usize, hd: usize) -> [Tensor; 4] {
        [
            Tensor::zeros(&[3 * hd, nin]),
            Tensor::zeros(&[3 * hd, hd]),
            Tensor::zeros(&[3 * hd]),
            Tensor::zeros(&[3 * hd]),
        ]
    }

    fn view(w: &[Tensor; 4]) -> GruWeights<'_> {
        GruWeights { w_ih: &w[0], w_hh: &w[1], b_ih: &w[2], b_hh: &w[3] }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let w = zero_weights(3, 4);
        let x = Tensor::new(&[5, 3], (0..15).map(f64::from).collect()).unwrap();
        let (y, _) = gru_layer(&x, view(&w), Direction::Forward).unwrap();
        assert_eq!(y.shape(), &[5, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_is_direction_agnostic() {
        let w = [
            Tensor::new(&[6, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, 0.1, 0.2, 0.3]).unwrap(),
            Tensor::new(&[6, 2], vec![0.05; 12]).unwrap(),
            Tensor::new(&[6], vec![0.1, 0.0, -0.1, 0.2, 0.0, 0.3]).unwrap(),
            Tensor::new(&[6], vec![0.0, 0.1, 0.0, -0.2, 0.1, 0.0]).unwrap(),
        ];
        let x = Tensor::new(&[1, 2], vec![0.7, -1.3]).unwrap();
        let (f, _) = gru_layer(&x, view(&w), Direction::Forward).unwrap();
        let (b, _) = gru_layer(&x, view(&w), Direction::Backward).unwrap();
        assert_eq!(f, b);
        assert!(f.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_direction_reverses_time() {
        let w = [
            Tensor::full(&[3, 1], 0.5),
            Tensor::full(&[3, 1], 0.3),
            Tensor::zeros(&[3]),
            Tensor::zeros(&[3]),
        ];
        let x = Tensor::new(&[3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        let xr = Tensor::new(&[3, 1], vec![-1.0, 0.0, 1.0]).unwrap();
        let (b, _) = gru_layer(&x, view(&w), Direction::Backward).unwrap();
        let (f, _) = gru_layer(&xr, view(&w), Direction::Forward).unwrap();
        let mut fr = f.data().to_vec();
        fr.reverse();
        assert_eq!(b.data(), &fr[..]);
    }

    #[test]
    fn rejects_bad_weight_shapes() {
        let mut w = zero_weights(3, 4);
        w[0] = Tensor::zeros(&[12, 2]);
        assert!(gru_layer(&Tensor::zeros(&[2, 3]), view(&w), Direction::Forward).is_err());
    }
}
