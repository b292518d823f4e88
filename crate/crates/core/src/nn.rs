//! Small f64 dense kernels with hand-written backward passes.
//!
//! Parameters live in f32 [`Tensor`]s; all activations and gradients are
//! computed in f64 so finite-difference checks are not swamped by rounding.

use crate::tensor::Tensor;

/// Row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix size");
        Self { rows, cols, data }
    }

    /// Interpret a 2-d tensor (or a 1-d tensor as a single row).
    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("expected 1-d or 2-d tensor, got {s:?}"),
        };
        Self {
            rows,
            cols,
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn added(&self, other: &Mat) -> Mat {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mean over rows, as a 1×cols matrix.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `x · wᵀ`: rows of `x` through a weight stored as `out × in`.
pub fn linear(x: &Mat, w: &Mat) -> Mat {
    assert_eq!(x.cols, w.cols, "linear: input width");
    let mut out = Mat::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xr = x.row(i);
        for j in 0..w.rows {
            out.data[i * w.rows + j] = dot(xr, w.row(j));
        }
    }
    out
}

pub fn linear_bias(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = linear(x, w);
    for r in 0..out.rows {
        for (o, bb) in out.row_mut(r).iter_mut().zip(b) {
            *o += bb;
        }
    }
    out
}

/// `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul: inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `aᵀ · b`, accumulated into `acc` (weight gradients: `dYᵀ X`).
pub fn accumulate_tn(acc: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.rows, b.rows);
    assert_eq!((acc.rows, acc.cols), (a.cols, b.cols));
    for r in 0..a.rows {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dst = &mut acc.data[i * acc.cols..(i + 1) * acc.cols];
            for (d, bv) in dst.iter_mut().zip(br) {
                *d += av * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub const LN_EPS: f64 = 1e-5;

/// Cached values of a row-wise layer norm.
pub struct LayerNormCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> (Mat, LayerNormCache) {
    let n = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..x.cols {
            let h = (row[c] - mean) * is;
            xhat.data[r * x.cols + c] = h;
            out.data[r * x.cols + c] = gamma[c] * h + beta[c];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates `dgamma`, `dbeta`.
pub fn layer_norm_backward(
    dy: &Mat,
    cache: &LayerNormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Mat {
    let n = dy.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..dy.cols {
            dgamma[c] += dyr[c] * xh[c];
            dbeta[c] += dyr[c];
            let dxh = dyr[c] * gamma[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= n;
        mean_dxh_xh /= n;
        let is = cache.inv_std[r];
        for c in 0..dy.cols {
            let dxh = dyr[c] * gamma[c];
            dx.data[r * dy.cols + c] = is * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

/// Multi-head cross-attention weights, each stored `out × in`.
pub struct AttnWeights<'a> {
    pub q: &'a Mat,
    pub k: &'a Mat,
    pub v: &'a Mat,
    pub o: &'a Mat,
}

pub struct AttnCache {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Per-head attention probabilities, `queries × keys`.
    pub probs: Vec<Mat>,
    pub concat: Mat,
}

/// Queries from `x`, keys and values from `ctx`; no masking.
pub fn cross_attention(x: &Mat, ctx: &Mat, w: &AttnWeights<'_>, n_heads: usize) -> (Mat, AttnCache) {
    let q = linear(x, w.q);
    let k = linear(ctx, w.k);
    let v = linear(ctx, w.v);
    let d = q.cols;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Mat::zeros(x.rows, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let off = h * dh;
        let mut p = Mat::zeros(x.rows, ctx.rows);
        for i in 0..x.rows {
            let qi = &q.row(i)[off..off + dh];
            let row = p.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[off..off + dh]) * scale;
            }
            softmax_in_place(row);
        }
        for i in 0..x.rows {
            for j in 0..ctx.rows {
                let pij = p.at(i, j);
                let vj = &v.row(j)[off..off + dh];
                let dst = &mut concat.data[i * d + off..i * d + off + dh];
                for (o, vv) in dst.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    let out = linear(&concat, w.o);
    (
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

pub struct AttnGrads {
    pub dq: Mat,
    pub dk: Mat,
    pub dv: Mat,
    pub do_: Mat,
}

impl AttnGrads {
    pub fn zeros(d: usize, d_in_q: usize, d_in_ctx: usize) -> Self {
        Self {
            dq: Mat::zeros(d, d_in_q),
            dk: Mat::zeros(d, d_in_ctx),
            dv: Mat::zeros(d, d_in_ctx),
            do_: Mat::zeros(d, d),
        }
    }
}

/// Returns `(dx, dctx)` and accumulates weight gradients into `g`.
pub fn cross_attention_backward(
    dout: &Mat,
    x: &Mat,
    ctx: &Mat,
    w: &AttnWeights<'_>,
    cache: &AttnCache,
    n_heads: usize,
    g: &mut AttnGrads,
) -> (Mat, Mat) {
    accumulate_tn(&mut g.do_, dout, &cache.concat);
    let dconcat = matmul(dout, w.o);
    let d = cache.q.cols;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(x.rows, d);
    let mut dk = Mat::zeros(ctx.rows, d);
    let mut dv = Mat::zeros(ctx.rows, d);
    for h in 0..n_heads {
        let off = h * dh;
        let p = &cache.probs[h];
        for i in 0..x.rows {
            let dci = &dconcat.row(i)[off..off + dh];
            // dP_ij = <dO_i, V_j>, then softmax backward.
            let dp: Vec<f64> = (0..ctx.rows)
                .map(|j| dot(dci, &cache.v.row(j)[off..off + dh]))
                .collect();
            let pr = p.row(i);
            let inner = dot(&dp, pr);
            for j in 0..ctx.rows {
                let pij = pr[j];
                // dV_j += P_ij dO_i
                for (t, dvv) in dv.data[j * d + off..j * d + off + dh].iter_mut().enumerate() {
                    *dvv += pij * dci[t];
                }
                let ds = pij * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    dq.data[i * d + off + t] += ds * cache.k.data[j * d + off + t];
                    dk.data[j * d + off + t] += ds * cache.q.data[i * d + off + t];
                }
            }
        }
    }
    accumulate_tn(&mut g.dq, &dq, x);
    accumulate_tn(&mut g.dk, &dk, ctx);
    accumulate_tn(&mut g.dv, &dv, ctx);
    let dx = matmul(&dq, w.q);
    let mut dctx = matmul(&dk, w.k);
    dctx.add_assign(&matmul(&dv, w.v));
    (dx, dctx)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Adam with bias correction over a flat list of parameter groups.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update; `params[i]` and `grads[i]` describe the same group.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f64>]) {
        self.step_with(params.len(), grads, |g, i, upd| {
            let p = &mut params[g][i];
            *p = (f64::from(*p) - upd) as f32;
        });
    }

    pub fn step_f64(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        self.step_with(params.len(), grads, |g, i, upd| params[g][i] -= upd);
    }

    fn step_with(&mut self, groups: usize, grads: &[Vec<f64>], mut apply: impl FnMut(usize, usize, f64)) {
        assert_eq!(groups, grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (gi, (g, (m, v))) in grads.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())).enumerate() {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                apply(gi, i, self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += eps;
                b[i] -= eps;
                (f(&a) - f(&b)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let n = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - n).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let x = vec![0.3, -1.2, 0.8, 2.0, -0.5, 0.1];
        let gamma = [1.1, 0.9, 1.3];
        let beta = [0.0, 0.2, -0.1];
        let weights = [0.7, -0.4, 1.9, 0.3, 0.5, -1.1];
        let loss = |x: &[f64]| {
            let (y, _) = layer_norm(&Mat::from_vec(2, 3, x.to_vec()), &gamma, &beta);
            dot(&y.data, &weights)
        };
        let (_, cache) = layer_norm(&Mat::from_vec(2, 3, x.clone()), &gamma, &beta);
        let dy = Mat::from_vec(2, 3, weights.to_vec());
        let (mut dg, mut db) = (vec![0.0; 3], vec![0.0; 3]);
        let dx = layer_norm_backward(&dy, &cache, &gamma, &mut dg, &mut db);
        for (a, n) in dx.data.iter().zip(numeric_grad(&loss, &x)) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn attention_backward_matches_difference() {
        let x = Mat::from_vec(2, 4, vec![0.1, -0.3, 0.5, 0.2, 0.7, 0.0, -0.4, 0.9]);
        let ctx = Mat::from_vec(3, 4, (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect());
        let mk = |s: f64| Mat::from_vec(4, 4, (0..16).map(|i| ((i as f64 * s).sin()) * 0.5).collect());
        let (wq, wk, wv, wo) = (mk(1.3), mk(0.7), mk(2.1), mk(0.4));
        let dout = Mat::from_vec(2, 4, vec![0.5, -1.0, 0.25, 0.75, -0.3, 0.2, 0.9, -0.6]);
        let w = AttnWeights { q: &wq, k: &wk, v: &wv, o: &wo };
        let (_, cache) = cross_attention(&x, &ctx, &w, 2);
        let mut g = AttnGrads::zeros(4, 4, 4);
        let (dx, dctx) = cross_attention_backward(&dout, &x, &ctx, &w, &cache, 2, &mut g);

        let fx = |xv: &[f64]| {
            let (y, _) = cross_attention(&Mat::from_vec(2, 4, xv.to_vec()), &ctx, &w, 2);
            dot(&y.data, &dout.data)
        };
        for (a, n) in dx.data.iter().zip(numeric_grad(&fx, &x.data)) {
            assert!((a - n).abs() < 1e-6);
        }
        let fc = |cv: &[f64]| {
            let (y, _) = cross_attention(&x, &Mat::from_vec(3, 4, cv.to_vec()), &w, 2);
            dot(&y.data, &dout.data)
        };
        for (a, n) in dctx.data.iter().zip(numeric_grad(&fc, &ctx.data)) {
            assert!((a - n).abs() < 1e-6);
        }
        let fv = |vv: &[f64]| {
            let wv2 = Mat::from_vec(4, 4, vv.to_vec());
            let w2 = AttnWeights { q: &wq, k: &wk, v: &wv2, o: &wo };
            let (y, _) = cross_attention(&x, &ctx, &w2, 2);
            dot(&y.data, &dout.data)
        };
        for (a, n) in g.dv.data.iter().zip(numeric_grad(&fv, &wv.data)) {
            assert!((a - n).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_normalized() {
        let mut r = [1000.0, 1000.0, 999.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r[0] == r[1] && r[0] > r[2]);
    }
}
