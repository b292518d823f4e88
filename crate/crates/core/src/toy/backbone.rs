//! Tiny two-stream backbone standing in for the vision-language model.
//!
//! The observation is embedded into `n_tokens` task tokens; a query layer
//! turns those into `n_action_queries` action tokens. Each block updates the
//! task tokens with a residual tanh layer and the action tokens with a
//! residual tanh layer that also reads the mean task token. The per-block
//! states are the `h_T` / `h_A` taps consumed by the action expert.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::uniform_fan_in;
use crate::nn::{self, linear_bias, Mat};
use crate::task_vector::LowRankUpdate;
use crate::tensor::{NamedTensorMap, Tensor};

pub const EMBED: &str = "vision.embed.weight";
pub const QUERY: &str = "lang.query.weight";
/// Tensors that receive low-rank adapters during finetuning.
pub const ADAPTED: [&str; 2] = [EMBED, QUERY];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub obs_dim: usize,
    pub d_model: usize,
    pub n_tokens: usize,
    pub n_action_queries: usize,
    pub num_blocks: usize,
}

impl BackboneConfig {
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, t, q) = (self.d_model, self.n_tokens, self.n_action_queries);
        let mut v = vec![
            (EMBED.to_string(), vec![t * d, self.obs_dim]),
            ("vision.embed.bias".into(), vec![t * d]),
            (QUERY.to_string(), vec![q * d, t * d]),
            ("lang.query.bias".into(), vec![q * d]),
        ];
        for k in 1..=self.num_blocks {
            v.push((format!("vision.block{k}.weight"), vec![d, d]));
            v.push((format!("vision.block{k}.bias"), vec![d]));
            v.push((format!("lang.block{k}.weight"), vec![d, d]));
            v.push((format!("lang.block{k}.bias"), vec![d]));
            v.push((format!("lang.block{k}.cross"), vec![d, d]));
        }
        v
    }

    pub fn init(&self, seed: u64) -> NamedTensorMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = NamedTensorMap::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with("bias") {
                Tensor::zeros(&shape)
            } else {
                uniform_fan_in(&shape, &mut rng)
            };
            m.insert(name, t).expect("unique backbone names");
        }
        m
    }
}

struct BlockWeights {
    wt: Mat,
    bt: Vec<f64>,
    wa: Mat,
    ba: Vec<f64>,
    wc: Mat,
}

/// f64 view of backbone weights.
pub(crate) struct Backbone {
    pub cfg: BackboneConfig,
    we: Mat,
    be: Vec<f64>,
    wq: Mat,
    bq: Vec<f64>,
    blocks: Vec<BlockWeights>,
}

/// Activations kept for the backward pass.
pub(crate) struct Trace {
    x: Vec<f64>,
    s0_flat: Vec<f64>,
    /// `s[k]`, `k = 0..=L`, each `n_tokens × d`.
    pub s: Vec<Mat>,
    /// `a[k]`, each `n_action_queries × d`.
    pub a: Vec<Mat>,
    ts: Vec<Mat>,
    ta: Vec<Mat>,
    means: Vec<Vec<f64>>,
}

/// Gradients aligned with [`BackboneConfig::param_shapes`].
pub(crate) type Grads = Vec<Vec<f64>>;

impl Backbone {
    pub fn from_map(cfg: BackboneConfig, map: &NamedTensorMap) -> Result<Self> {
        for (name, shape) in cfg.param_shapes() {
            let t = map.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(&shape, t.shape(), name));
            }
        }
        let m = |n: &str| Mat::from_tensor(map.get(n).expect("checked"));
        let v = |n: &str| m(n).data;
        Ok(Self {
            cfg,
            we: m(EMBED),
            be: v("vision.embed.bias"),
            wq: m(QUERY),
            bq: v("lang.query.bias"),
            blocks: (1..=cfg.num_blocks)
                .map(|k| BlockWeights {
                    wt: m(&format!("vision.block{k}.weight")),
                    bt: v(&format!("vision.block{k}.bias")),
                    wa: m(&format!("lang.block{k}.weight")),
                    ba: v(&format!("lang.block{k}.bias")),
                    wc: m(&format!("lang.block{k}.cross")),
                })
                .collect(),
        })
    }

    /// Replace the two adapted tensors by `base + Σ scaling·up·down`.
    pub fn set_adapted(&mut self, base_embed: &Mat, base_query: &Mat, adapters: &[Adapter]) {
        self.we = base_embed.clone();
        self.wq = base_query.clone();
        for a in adapters {
            let dst = if a.target == EMBED { &mut self.we } else { &mut self.wq };
            let prod = nn::matmul(&a.up, &a.down);
            for (d, p) in dst.data.iter_mut().zip(&prod.data) {
                *d += a.scaling * p;
            }
        }
    }

    pub fn embed_matrix(&self) -> &Mat {
        &self.we
    }

    pub fn query_matrix(&self) -> &Mat {
        &self.wq
    }

    pub fn forward(&self, x: &[f64]) -> Trace {
        let (d, t, q) = (self.cfg.d_model, self.cfg.n_tokens, self.cfg.n_action_queries);
        let xm = Mat::from_vec(1, x.len(), x.to_vec());
        let s0_flat = linear_bias(&xm, &self.we, &self.be).data;
        let s0 = Mat::from_vec(t, d, s0_flat.clone());
        let sflat = Mat::from_vec(1, t * d, s0_flat.clone());
        let a0 = linear_bias(&sflat, &self.wq, &self.bq).map(f64::tanh);
        let a0 = Mat::from_vec(q, d, a0.data);
        let mut trace = Trace {
            x: x.to_vec(),
            s0_flat,
            s: vec![s0],
            a: vec![a0],
            ts: Vec::new(),
            ta: Vec::new(),
            means: Vec::new(),
        };
        for b in &self.blocks {
            let s_prev = trace.s.last().expect("s0");
            let ts = linear_bias(s_prev, &b.wt, &b.bt).map(f64::tanh);
            let s = s_prev.added(&ts);
            let mean = s.mean_rows();
            let a_prev = trace.a.last().expect("a0");
            let cross = nn::linear(&Mat::from_vec(1, d, mean.clone()), &b.wc).data;
            let mut pre = linear_bias(a_prev, &b.wa, &b.ba);
            for r in 0..pre.rows {
                for (v, c) in pre.row_mut(r).iter_mut().zip(&cross) {
                    *v += c;
                }
            }
            let ta = pre.map(f64::tanh);
            let a = a_prev.added(&ta);
            trace.ts.push(ts);
            trace.ta.push(ta);
            trace.means.push(mean);
            trace.s.push(s);
            trace.a.push(a);
        }
        trace
    }

    pub fn zero_grads(&self) -> Grads {
        self.cfg
            .param_shapes()
            .iter()
            .map(|(_, s)| vec![0.0; s.iter().product()])
            .collect()
    }

    /// Backpropagate gradients arriving at the block taps (`ds[k-1]`,
    /// `da[k-1]` for block `k`; missing entries are zero) plus an optional
    /// gradient on the final action state; accumulates into `g`.
    pub fn backward(&self, tr: &Trace, ds_tap: &[Mat], da_tap: &[Mat], g: &mut Grads) {
        let (d, t, q) = (self.cfg.d_model, self.cfg.n_tokens, self.cfg.n_action_queries);
        let l = self.blocks.len();
        let mut ds = Mat::zeros(t, d);
        let mut da = Mat::zeros(q, d);
        for k in (1..=l).rev() {
            let b = &self.blocks[k - 1];
            if let Some(ext) = ds_tap.get(k - 1).filter(|m| !m.data.is_empty()) {
                ds.add_assign(ext);
            }
            if let Some(ext) = da_tap.get(k - 1).filter(|m| !m.data.is_empty()) {
                da.add_assign(ext);
            }
            let gi = 4 + 5 * (k - 1);
            // action path
            let mut dpa = da.clone();
            for (v, y) in dpa.data.iter_mut().zip(&tr.ta[k - 1].data) {
                *v *= 1.0 - y * y;
            }
            let mut dwa = Mat::zeros(d, d);
            nn::accumulate_tn(&mut dwa, &dpa, &tr.a[k - 1]);
            add_into(&mut g[gi + 2], &dwa.data);
            let dsum = dpa.sum_rows();
            add_into(&mut g[gi + 3], &dsum);
            let mean = &tr.means[k - 1];
            for i in 0..d {
                for j in 0..d {
                    g[gi + 4][i * d + j] += dsum[i] * mean[j];
                }
            }
            let dmean = nn::matmul(&Mat::from_vec(1, d, dsum), &b.wc).data;
            da.add_assign(&nn::matmul(&dpa, &b.wa));
            for r in 0..t {
                for (v, dm) in ds.row_mut(r).iter_mut().zip(&dmean) {
                    *v += dm / t as f64;
                }
            }
            // task path
            let mut dps = ds.clone();
            for (v, y) in dps.data.iter_mut().zip(&tr.ts[k - 1].data) {
                *v *= 1.0 - y * y;
            }
            let mut dwt = Mat::zeros(d, d);
            nn::accumulate_tn(&mut dwt, &dps, &tr.s[k - 1]);
            add_into(&mut g[gi], &dwt.data);
            add_into(&mut g[gi + 1], &dps.sum_rows());
            ds.add_assign(&nn::matmul(&dps, &b.wt));
        }
        // query layer: a0 = tanh(Wq s0 + bq)
        let dq: Vec<f64> = da
            .data
            .iter()
            .zip(&tr.a[0].data)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        for i in 0..q * d {
            for j in 0..t * d {
                g[2][i * t * d + j] += dq[i] * tr.s0_flat[j];
            }
        }
        add_into(&mut g[3], &dq);
        let ds0 = nn::matmul(&Mat::from_vec(1, q * d, dq), &self.wq);
        ds.add_assign(&Mat::from_vec(t, d, ds0.data));
        // embedding: s0 = We x + be
        let n = tr.x.len();
        for i in 0..t * d {
            for j in 0..n {
                g[0][i * n + j] += ds.data[i] * tr.x[j];
            }
        }
        add_into(&mut g[1], &ds.data);
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// A trainable low-rank adapter in f64.
#[derive(Debug, Clone)]
pub(crate) struct Adapter {
    pub target: &'static str,
    /// `out × r`
    pub up: Mat,
    /// `r × in`
    pub down: Mat,
    pub scaling: f64,
}

impl Adapter {
    /// `down` starts at zero so the adapted model equals the base; `up` is
    /// random.
    pub fn init(target: &'static str, out: usize, inp: usize, rank: usize, scaling: f64, rng: &mut ChaCha8Rng) -> Self {
        let up = uniform_fan_in(&[out, rank], rng);
        Self {
            target,
            up: Mat::from_tensor(&up),
            down: Mat::zeros(rank, inp),
            scaling,
        }
    }

    /// Given the gradient of the full adapted matrix, gradients of
    /// `(up, down)`.
    pub fn grads(&self, dw: &Mat) -> (Vec<f64>, Vec<f64>) {
        // dUp = s·dW·Downᵀ, dDown = s·Upᵀ·dW
        let mut dup = Mat::zeros(self.up.rows, self.up.cols);
        let mut ddown = Mat::zeros(self.down.rows, self.down.cols);
        let r = self.up.cols;
        for i in 0..dw.rows {
            for j in 0..dw.cols {
                let gv = dw.at(i, j) * self.scaling;
                if gv == 0.0 {
                    continue;
                }
                for k in 0..r {
                    dup.data[i * r + k] += gv * self.down.at(k, j);
                    ddown.data[k * dw.cols + j] += gv * self.up.at(i, k);
                }
            }
        }
        (dup.data, ddown.data)
    }

    pub fn to_low_rank(&self) -> Result<LowRankUpdate> {
        let t = |m: &Mat, what: &str| {
            Tensor::from_computed(&[m.rows, m.cols], m.data.iter().map(|&v| v as f32).collect(), what)
        };
        Ok(LowRankUpdate {
            down: t(&self.down, self.target)?,
            up: t(&self.up, self.target)?,
            scaling: self.scaling as f32,
            target_name: self.target.to_string(),
        })
    }
}

/// Pooled `(h_T, h_A)` of 1-based `block` for one observation.
pub(crate) fn pooled(trace: &Trace, block: usize) -> (Vec<f64>, Vec<f64>) {
    (trace.s[block].mean_rows(), trace.a[block].mean_rows())
}
