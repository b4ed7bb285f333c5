//! Forward and backward kernels on flat row-major buffers.
//!
//! Shapes are validated by the caller (`Graph::evaluate`); kernels assume
//! consistent extents.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `[M,K] x [K,N]` accumulated into `out` (`[M,N]`).
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `A^T B` with `A: [K,M]`, `B: [K,N]`, accumulated into `[M,N]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `A B^T` with `A: [M,K]`, `B: [N,K]`, accumulated into `[M,N]`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Geometry of a grouped 1-D convolution with stride 1.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub groups: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub fn len_out(&self) -> usize {
        self.len_in + self.pad_left + self.pad_right + 1 - self.kernel
    }

    /// Output positions `t` for which input index `t + k - pad_left` is in range.
    fn valid(&self, k: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(k);
        let hi = (self.len_in + self.pad_left).saturating_sub(k).min(self.len_out());
        (lo, hi.max(lo))
    }
}

pub fn conv1d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let to = g.len_out();
    let cin_g = g.in_ch / g.groups;
    let cout_g = g.out_ch / g.groups;
    let mut y = vec![0.0; g.batch * g.out_ch * to];
    for b in 0..g.batch {
        for oc in 0..g.out_ch {
            let grp = oc / cout_g;
            let yrow = &mut y[(b * g.out_ch + oc) * to..(b * g.out_ch + oc + 1) * to];
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xrow = &x[(b * g.in_ch + ic) * g.len_in..(b * g.in_ch + ic + 1) * g.len_in];
                let wrow = &w[(oc * cin_g + icl) * g.kernel..(oc * cin_g + icl + 1) * g.kernel];
                for (k, &wv) in wrow.iter().enumerate() {
                    let (lo, hi) = g.valid(k);
                    let off = k as isize - g.pad_left as isize;
                    let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    for (o, xv) in yrow[lo..hi].iter_mut().zip(xs) {
                        *o += wv * xv;
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw)`; `dx` is only computed when requested.
pub fn conv1d_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let to = g.len_out();
    let cin_g = g.in_ch / g.groups;
    let cout_g = g.out_ch / g.groups;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    for b in 0..g.batch {
        for oc in 0..g.out_ch {
            let grp = oc / cout_g;
            let dyrow = &dy[(b * g.out_ch + oc) * to..(b * g.out_ch + oc + 1) * to];
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xbase = (b * g.in_ch + ic) * g.len_in;
                let wbase = (oc * cin_g + icl) * g.kernel;
                for k in 0..g.kernel {
                    let (lo, hi) = g.valid(k);
                    let off = k as isize - g.pad_left as isize;
                    let s = xbase + (lo as isize + off) as usize;
                    let e = xbase + (hi as isize + off) as usize;
                    if let Some(dw) = dw.as_mut() {
                        dw[wbase + k] +=
                            dyrow[lo..hi].iter().zip(&x[s..e]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wv = w[wbase + k];
                        for (d, gy) in dx[s..e].iter_mut().zip(&dyrow[lo..hi]) {
                            *d += wv * gy;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Batch-norm forward over axis 1 of `[B, C, R]`. Returns `(y, xhat, inv_std)`.
/// In training mode the running statistics are updated in place.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
    batch: usize,
    ch: usize,
    rest: usize,
    train: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (batch * rest) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    if train {
        for b in 0..batch {
            for c in 0..ch {
                let s = &x[(b * ch + c) * rest..(b * ch + c + 1) * rest];
                mean[c] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for b in 0..batch {
            for c in 0..ch {
                let s = &x[(b * ch + c) * rest..(b * ch + c + 1) * rest];
                var[c] += s.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..ch {
            running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * mean[c];
            running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * var[c] * unbias;
        }
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + NORM_EPS)).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let r = (b * ch + c) * rest..(b * ch + c + 1) * rest;
            for i in r {
                let h = (x[i] - mean[c]) * inv[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat, inv)
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv: &[f64],
    gamma: &[f64],
    batch: usize,
    ch: usize,
    rest: usize,
    train: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (batch * rest) as f64;
    let mut dgamma = vec![0.0; ch];
    let mut dbeta = vec![0.0; ch];
    for b in 0..batch {
        for c in 0..ch {
            let r = (b * ch + c) * rest..(b * ch + c + 1) * rest;
            for i in r {
                dgamma[c] += dy[i] * xhat[i];
                dbeta[c] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..batch {
        for c in 0..ch {
            let scale = gamma[c] * inv[c];
            let r = (b * ch + c) * rest..(b * ch + c + 1) * rest;
            for i in r {
                dx[i] = if train {
                    scale / n * (n * dy[i] - dbeta[c] - xhat[i] * dgamma[c])
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Layer-norm over the last axis (`rows x d`). Returns `(y, xhat, inv_std)`.
pub fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let s = &x[r * d..(r + 1) * d];
        let mean = s.iter().sum::<f64>() / d as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let iv = 1.0 / math::sqrt(var + NORM_EPS);
        inv[r] = iv;
        for j in 0..d {
            let h = (s[j] - mean) * iv;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv)
}

pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv: &[f64],
    gamma: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        let s1: f64 = dxhat.iter().sum();
        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        for j in 0..d {
            dx[r * d + j] = inv[r] / d as f64 * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xs, ys) in x.chunks(d).zip(y.chunks_mut(d)) {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in ys.iter_mut().zip(xs) {
            *o = math::exp(v - m);
            z += *o;
        }
        ys.iter_mut().for_each(|o| *o /= z);
    }
    y
}

pub fn log_softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xs, ys) in x.chunks(d).zip(y.chunks_mut(d)) {
        let lse = math::log_sum_exp(xs);
        for (o, &v) in ys.iter_mut().zip(xs) {
            *o = v - lse;
        }
    }
    y
}

pub fn softmax_backward(y: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((ys, dys), dxs) in y.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let dot: f64 = ys.iter().zip(dys).map(|(a, b)| a * b).sum();
        for ((o, &yv), &g) in dxs.iter_mut().zip(ys).zip(dys) {
            *o = yv * (g - dot);
        }
    }
    dx
}

pub fn log_softmax_backward(y: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((ys, dys), dxs) in y.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let s: f64 = dys.iter().sum();
        for ((o, &yv), &g) in dxs.iter_mut().zip(ys).zip(dys) {
            *o = g - math::exp(yv) * s;
        }
    }
    dx
}

pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        math::exp(v) - 1.0
    }
}

/// Mean pooling with window = stride over the last axis.
pub fn avg_pool_forward(x: &[f64], len: usize, window: usize) -> Vec<f64> {
    let out = len / window;
    let rows = x.len() / len;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for j in 0..out {
            let s = &x[r * len + j * window..r * len + (j + 1) * window];
            y[r * out + j] = s.iter().sum::<f64>() / window as f64;
        }
    }
    y
}

pub fn avg_pool_backward(dy: &[f64], len: usize, window: usize) -> Vec<f64> {
    let out = len / window;
    let rows = dy.len() / out;
    let mut dx = vec![0.0; rows * len];
    for r in 0..rows {
        for j in 0..out {
            let g = dy[r * out + j] / window as f64;
            dx[r * len + j * window..r * len + (j + 1) * window].iter_mut().for_each(|d| *d = g);
        }
    }
    dx
}

/// Moves axes of a tensor according to `perm` (output axis `i` is input axis `perm[i]`).
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut y = Vec::with_capacity(x.len());
    if rank == 0 || x.is_empty() {
        y.extend_from_slice(x);
        return y;
    }
    // odometer over the outer output axes, strided copy along the last one
    let (inner, inner_stride) = (out_shape[rank - 1], strides[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..x.len() / inner {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            y.extend_from_slice(&x[off..off + inner]);
        } else {
            y.extend((0..inner).map(|j| x[off + j * inner_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    y
}

/// Scaled dot-product attention on `[G, N, d]` queries and `[G, M, d]` keys/values.
/// Returns `(out, probs)` with `probs: [G, N, M]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    groups: usize,
    n: usize,
    m: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / math::sqrt(d as f64);
    let mut probs = vec![0.0; groups * n * m];
    let mut out = vec![0.0; groups * n * d];
    for g in 0..groups {
        let qg = &q[g * n * d..(g + 1) * n * d];
        let kg = &k[g * m * d..(g + 1) * m * d];
        let vg = &v[g * m * d..(g + 1) * m * d];
        let pg = &mut probs[g * n * m..(g + 1) * n * m];
        matmul_nt_acc(qg, kg, pg, n, d, m);
        pg.iter_mut().for_each(|s| *s *= scale);
        let sm = softmax_rows(pg, m);
        pg.copy_from_slice(&sm);
        matmul_acc(pg, vg, &mut out[g * n * d..(g + 1) * n * d], n, m, d);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    groups: usize,
    n: usize,
    m: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / math::sqrt(d as f64);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; n * m];
    for g in 0..groups {
        let qg = &q[g * n * d..(g + 1) * n * d];
        let kg = &k[g * m * d..(g + 1) * m * d];
        let vg = &v[g * m * d..(g + 1) * m * d];
        let pg = &probs[g * n * m..(g + 1) * n * m];
        let dog = &dout[g * n * d..(g + 1) * n * d];
        matmul_tn_acc(pg, dog, &mut dv[g * m * d..(g + 1) * m * d], n, m, d);
        dp.iter_mut().for_each(|x| *x = 0.0);
        matmul_nt_acc(dog, vg, &mut dp, n, d, m);
        let mut ds = softmax_backward(pg, &dp, m);
        ds.iter_mut().for_each(|x| *x *= scale);
        matmul_acc(&ds, kg, &mut dq[g * n * d..(g + 1) * n * d], n, m, d);
        matmul_tn_acc(&ds, qg, &mut dk[g * m * d..(g + 1) * m * d], n, m, d);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padded_conv_matches_direct_sum() {
        // single channel, kernel 3, same padding: y[t] = w0 x[t-1] + w1 x[t] + w2 x[t+1]
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [0.5, 1.0, -1.0];
        let g = ConvGeom {
            batch: 1,
            in_ch: 1,
            out_ch: 1,
            groups: 1,
            len_in: 4,
            kernel: 3,
            pad_left: 1,
            pad_right: 1,
        };
        let y = conv1d_forward(&x, &w, &g);
        assert_eq!(y, vec![-1.0, -0.5, 0.0, 5.5]);
    }

    #[test]
    fn permute_transposes_matrix() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(permute(&x, &[2, 3], &[1, 0]), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn pooling_drops_tail() {
        let x = [1.0, 3.0, 5.0, 7.0, 100.0];
        assert_eq!(avg_pool_forward(&x, 5, 2), vec![2.0, 6.0]);
        assert_eq!(avg_pool_backward(&[2.0, 4.0], 5, 2), vec![1.0, 1.0, 2.0, 2.0, 0.0]);
    }
}
