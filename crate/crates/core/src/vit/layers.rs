//! Forward/backward kernels shared by the segments. All operate on `[rows, cols]` tensors.

use crate::error::Result;
use crate::rng::SeededRng;
use crate::tensor::{softmax_in_place, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

pub(crate) fn init_normal(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = std * rng.standard_normal();
    }
    t
}

/// `x · w + b`
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

/// Returns `(dx, dw, db)` for `y = x · w + b`.
pub(crate) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dx = dy.matmul_nt(w)?;
    let dw = x.matmul_tn(dy)?;
    let db = dy.sum_rows();
    Ok((dx, dw, db))
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, LayerNormCache) {
    let c = x.cols();
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for row in xhat.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    let mut y = xhat.clone();
    for row in y.data_mut().chunks_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = dy.cols();
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(dy.shape());
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut dxhat = vec![0.0; c];
        for j in 0..c {
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma.data()[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        let rstd = cache.rstd[r];
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = rstd * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Copies columns `[start, start + width)` into a new `[rows, width]` tensor.
pub(crate) fn take_cols(x: &Tensor, start: usize, width: usize) -> Tensor {
    let mut out = Tensor::zeros(&[x.rows(), width]);
    for r in 0..x.rows() {
        out.row_mut(r)
            .copy_from_slice(&x.row(r)[start..start + width]);
    }
    out
}

pub(crate) fn put_cols(dst: &mut Tensor, src: &Tensor, start: usize) {
    let width = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + width].copy_from_slice(src.row(r));
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    /// Per-head attention probabilities `[N, N]`.
    pub probs: Vec<Tensor>,
}

/// Scaled dot-product attention over a fused `[N, 3d]` QKV tensor; returns `[N, d]`.
pub(crate) fn attention(qkv: &Tensor, heads: usize) -> Result<(Tensor, AttentionCache)> {
    let d = qkv.cols() / 3;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Tensor::zeros(&[qkv.rows(), d]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = take_cols(qkv, h * hd, hd);
        let k = take_cols(qkv, d + h * hd, hd);
        let v = take_cols(qkv, 2 * d + h * hd, hd);
        let mut s = q.matmul_nt(&k)?.scale(scale);
        let c = s.cols();
        for row in s.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let o = s.matmul(&v)?;
        put_cols(&mut out, &o, h * hd);
        probs.push(s);
    }
    Ok((out, AttentionCache { probs }))
}

/// Gradient of [`attention`] with respect to the fused QKV input.
pub(crate) fn attention_backward(
    qkv: &Tensor,
    cache: &AttentionCache,
    dout: &Tensor,
) -> Result<Tensor> {
    let heads = cache.probs.len();
    let d = qkv.cols() / 3;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dqkv = Tensor::zeros(qkv.shape());
    for (h, p) in cache.probs.iter().enumerate() {
        let q = take_cols(qkv, h * hd, hd);
        let k = take_cols(qkv, d + h * hd, hd);
        let v = take_cols(qkv, 2 * d + h * hd, hd);
        let dout_h = take_cols(dout, h * hd, hd);
        let dp = dout_h.matmul_nt(&v)?;
        let dv = p.matmul_tn(&dout_h)?;
        let mut ds = dp;
        let n = p.cols();
        for r in 0..p.rows() {
            let pr = p.row(r);
            let dot: f64 = ds.row(r).iter().zip(pr).map(|(a, b)| a * b).sum();
            for (x, &pv) in ds.row_mut(r).iter_mut().zip(pr).take(n) {
                *x = pv * (*x - dot);
            }
        }
        let dq = ds.matmul(&k)?.scale(scale);
        let dk = ds.matmul_tn(&q)?.scale(scale);
        put_cols(&mut dqkv, &dq, h * hd);
        put_cols(&mut dqkv, &dk, d + h * hd);
        put_cols(&mut dqkv, &dv, 2 * d + h * hd);
    }
    Ok(dqkv)
}
