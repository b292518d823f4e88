//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use mergeforge::expert::{ActionExpert, ExpertConfig, ExpertInputs};
use mergeforge::{NamedTensorMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_inputs(cfg: &ExpertConfig, rng: &mut ChaCha8Rng, tokens: (usize, usize)) -> ExpertInputs {
    ExpertInputs {
        task: (0..cfg.num_blocks).map(|_| random_tensor(&[tokens.0, cfg.d_model], rng, 1.0)).collect(),
        action: (0..cfg.num_blocks).map(|_| random_tensor(&[tokens.1, cfg.d_model], rng, 1.0)).collect(),
    }
}

pub fn mse_batch(expert: &ActionExpert, batch: &[(ExpertInputs, Tensor)]) -> f64 {
    let mut total = 0.0;
    for (x, y) in batch {
        let out = expert.forward(x).unwrap();
        let se: f64 = out
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum();
        total += se / out.len() as f64;
    }
    total / batch.len() as f64
}

/// Central differences over every parameter; returns per-group
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
pub fn gradient_check(expert: &ActionExpert, batch: &[(ExpertInputs, Tensor)], eps: f32) -> Vec<(String, f64)> {
    let (_, grads) = expert.backward(batch).unwrap();
    let base = expert.to_map();
    let mut out = Vec::new();
    for (name, analytic) in grads.names.iter().zip(&grads.values) {
        let t = base.get(name).unwrap();
        let mut numeric = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let eval = |delta: f32| {
                let mut data = t.data().to_vec();
                data[i] += delta;
                let step = f64::from(data[i]) - f64::from(t.data()[i]);
                let mut m: NamedTensorMap = base.clone();
                m.replace(name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
                (ActionExpert::from_map(&m).unwrap().loss(batch).unwrap(), step)
            };
            let (lp, sp) = eval(eps);
            let (lm, sm) = eval(-eps);
            numeric.push((lp - lm) / (sp - sm));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        out.push((name.clone(), if denom == 0.0 { 0.0 } else { diff / denom }));
    }
    out
}

pub fn small_expert_config() -> ExpertConfig {
    ExpertConfig { num_blocks: 2, d_model: 8, n_heads: 2, d_ff: 16, action_dim: 6, horizon: 4 }
}

/// Straight-line `|t| > λ|m − t|` per element.
pub fn mask_oracle(tau: &[f32], merged: &[f32], lambda: f32) -> Vec<f32> {
    let mut out = Vec::new();
    for i in 0..tau.len() {
        let residual = merged[i] - tau[i];
        let keep = tau[i].abs() > lambda * residual.abs();
        out.push(if keep { 1.0 } else { 0.0 });
    }
    out
}

/// Task Arithmetic as an f64 loop sum.
pub fn ta_oracle(vectors: &[Vec<f32>], alpha: f64) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += f64::from(x);
        }
    }
    out.iter().map(|s| alpha * s).collect()
}

/// TIES spelled out: keep the top `ceil(keep·n)` magnitudes (ties at the
/// threshold kept), elect the sign of the trimmed sum (zero counts as
/// positive), average the agreeing nonzero entries.
pub fn ties_oracle(vectors: &[Vec<f32>], keep_fraction: f64) -> Vec<f64> {
    let n = vectors[0].len();
    let k = ((keep_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let trimmed: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let mut mags: Vec<f32> = v.iter().map(|x| x.abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let threshold = mags[k.min(n) - 1];
            v.iter()
                .map(|&x| if x.abs() >= threshold { f64::from(x) } else { 0.0 })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let total: f64 = trimmed.iter().map(|t| t[i]).sum();
        let positive = total >= 0.0;
        let mut sum = 0.0;
        let mut count = 0;
        for t in &trimmed {
            if t[i] != 0.0 && (t[i] > 0.0) == positive {
                sum += t[i];
                count += 1;
            }
        }
        out[i] = if count == 0 { 0.0 } else { sum / count as f64 };
    }
    out
}

/// `‖a − b‖ / ‖b‖`, or `‖a‖` when `b` is zero.
pub fn rel_error(a: &[f32], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(&x, y)| (f64::from(x) - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 { diff } else { diff / norm }
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n × n` matrix; returns
/// eigenvalues descending and matching unit eigenvectors.
pub fn jacobi_eigen(n: usize, a: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

/// `√(Σ_rows ⟨row, h⟩²)` with explicit loops.
pub fn projection_norm_oracle(rows: usize, cols: usize, p: &[f32], h: &[f64]) -> f64 {
    let mut total = 0.0;
    for r in 0..rows {
        let mut dot = 0.0;
        for c in 0..cols {
            dot += f64::from(p[r * cols + c]) * h[c];
        }
        total += dot * dot;
    }
    total.sqrt()
}

/// Random map with assorted names, ranks, metadata and edge-case values.
pub fn random_map(rng: &mut ChaCha8Rng) -> NamedTensorMap {
    let mut map = NamedTensorMap::new();
    let n = rng.random_range(1..6);
    for i in 0..n {
        let rank = rng.random_range(1..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| match rng.random_range(0..10) {
                0 => -0.0,
                1 => f32::MIN_POSITIVE / 4.0,
                2 => f32::MAX,
                _ => rng.random_range(-10.0f32..10.0),
            })
            .collect();
        map.insert(format!("part{}.w{i}", rng.random_range(0..3)), Tensor::new(shape, data).unwrap())
            .unwrap();
    }
    if rng.random_bool(0.5) {
        map.set_meta("kind", "model");
        map.set_meta("note", format!("n={n}"));
    }
    map
}
