//! Cross-attention-only action expert.
//!
//! Each block reads two conditioning streams from the backbone: a task stream
//! that passes through an elementwise sigmoid gate, and an action stream used
//! as-is. A block is pre-norm cross-attention over the gated task stream,
//! pre-norm cross-attention over the action stream, then a pre-norm GELU
//! feed-forward, each with a residual add. Query tokens never attend to each
//! other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, cross_attention, cross_attention_backward, layer_norm, layer_norm_backward, linear_bias, AttnCache, AttnGrads, AttnWeights, LayerNormCache, Mat,
};
use crate::task_vector::{KIND_KEY, TASK_ID_KEY};
use crate::tensor::{NamedTensorMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub action_dim: usize,
    /// Action-chunk length; one query token per step.
    pub horizon: usize,
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.num_blocks,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.action_dim,
            self.horizon,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("all expert dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Block-local parameter names, in storage order.
pub const BLOCK_PARAMS: [&str; 18] = [
    "ln_t.gamma",
    "ln_t.beta",
    "attn_t.q",
    "attn_t.k",
    "attn_t.v",
    "attn_t.o",
    "ln_a.gamma",
    "ln_a.beta",
    "attn_a.q",
    "attn_a.k",
    "attn_a.v",
    "attn_a.o",
    "ln_f.gamma",
    "ln_f.beta",
    "ff.w1",
    "ff.b1",
    "ff.w2",
    "ff.b2",
];

mod idx {
    pub const LN_T_G: usize = 0;
    pub const LN_T_B: usize = 1;
    pub const ATTN_T: usize = 2;
    pub const LN_A_G: usize = 6;
    pub const LN_A_B: usize = 7;
    pub const ATTN_A: usize = 8;
    pub const LN_F_G: usize = 12;
    pub const LN_F_B: usize = 13;
    pub const W1: usize = 14;
    pub const B1: usize = 15;
    pub const W2: usize = 16;
    pub const B2: usize = 17;
}

/// Offsets of q, k, v, o within an attention group.
const Q: usize = 0;
const K: usize = 1;
const V: usize = 2;
const O: usize = 3;

/// One expert block; tensors follow [`BLOCK_PARAMS`]. Projections are stored
/// `out × in` and applied as `x · Wᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBlock {
    pub tensors: Vec<Tensor>,
}

impl ExpertBlock {
    fn shapes(cfg: &ExpertConfig) -> [Vec<usize>; 18] {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let sq = vec![d, d];
        [
            vec![d],
            vec![d],
            sq.clone(),
            sq.clone(),
            sq.clone(),
            sq.clone(),
            vec![d],
            vec![d],
            sq.clone(),
            sq.clone(),
            sq.clone(),
            sq,
            vec![d],
            vec![d],
            vec![f, d],
            vec![f],
            vec![d, f],
            vec![d],
        ]
    }

    fn init(cfg: &ExpertConfig, rng: &mut ChaCha8Rng) -> Self {
        let tensors = Self::shapes(cfg)
            .into_iter()
            .zip(BLOCK_PARAMS)
            .map(|(shape, name)| {
                if name.ends_with("gamma") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with("beta") || name.starts_with("ff.b") {
                    Tensor::zeros(&shape)
                } else {
                    uniform_fan_in(&shape, rng)
                }
            })
            .collect();
        Self { tensors }
    }

    /// Projection matrix of one attention path: `path` is `'t'` or `'a'`,
    /// `which` one of `'q' 'k' 'v' 'o'`.
    pub fn projection(&self, path: char, which: char) -> &Tensor {
        let base = if path == 't' { idx::ATTN_T } else { idx::ATTN_A };
        let off = match which {
            'q' => Q,
            'k' => K,
            'v' => V,
            _ => O,
        };
        &self.tensors[base + off]
    }

    fn flat_norm_sq(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum()
    }
}

pub(crate) fn uniform_fan_in(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = *shape.last().unwrap_or(&1) as f64;
    let bound = if shape.len() >= 2 { 1.0 / fan_in.sqrt() } else { 1.0 };
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// Full expert: query embedding, `L` blocks, per-token output head.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionExpert {
    pub config: ExpertConfig,
    /// `horizon × d_model` learned query tokens.
    pub query_embed: Tensor,
    pub blocks: Vec<ExpertBlock>,
    /// `action_dim × d_model`.
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Conditioning for one sample: per block, a task stream and an action
/// stream, each `tokens × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertInputs {
    pub task: Vec<Tensor>,
    pub action: Vec<Tensor>,
}

pub(crate) struct Streams {
    pub task: Vec<Mat>,
    pub action: Vec<Mat>,
}

impl ExpertInputs {
    pub(crate) fn to_streams(&self) -> Streams {
        Streams {
            task: self.task.iter().map(Mat::from_tensor).collect(),
            action: self.action.iter().map(Mat::from_tensor).collect(),
        }
    }
}

/// Gradients aligned with [`ActionExpert::param_names`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrads {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl ExpertGrads {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i].as_slice())
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl ActionExpert {
    pub fn init(config: ExpertConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query_embed = uniform_fan_in(&[config.horizon, config.d_model], &mut rng);
        let blocks = (0..config.num_blocks)
            .map(|_| ExpertBlock::init(&config, &mut rng))
            .collect();
        let head_weight = uniform_fan_in(&[config.action_dim, config.d_model], &mut rng);
        Ok(Self {
            config,
            query_embed,
            blocks,
            head_weight,
            head_bias: Tensor::zeros(&[config.action_dim]),
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed.query".to_string()];
        for i in 1..=self.blocks.len() {
            names.extend(BLOCK_PARAMS.iter().map(|p| format!("block{i}.{p}")));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.query_embed];
        for b in &self.blocks {
            out.extend(b.tensors.iter());
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.query_embed];
        for b in &mut self.blocks {
            out.extend(b.tensors.iter_mut());
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_map(&self) -> NamedTensorMap {
        let mut m = NamedTensorMap::new();
        for (name, t) in self.param_names().into_iter().zip(self.tensors()) {
            m.insert(name, t.clone()).expect("unique expert names");
        }
        m.with_meta(KIND_KEY, "action_expert")
            .with_meta("config", serde_json::to_string(&self.config).expect("config"))
    }

    pub fn from_map(map: &NamedTensorMap) -> Result<Self> {
        let config = config_from_meta(map)?;
        let mut expert = Self::init(config, 0)?;
        let names = expert.param_names();
        for (name, slot) in names.iter().zip(expert.tensors_mut()) {
            let t = map.require(name)?;
            if !t.same_shape(slot) {
                return Err(Error::shape(slot.shape(), t.shape(), name.as_str()));
            }
            *slot = t.clone();
        }
        Ok(expert)
    }

    /// Predicted action chunk, `horizon × action_dim`.
    pub fn forward(&self, inputs: &ExpertInputs) -> Result<Tensor> {
        let w = self.prepare();
        let streams = inputs.to_streams();
        w.check_streams(&streams)?;
        let y = w.forward(&streams, None)?;
        to_tensor(&y, "expert output")
    }

    /// Batch mean-squared error evaluated entirely in f64.
    pub fn loss(&self, batch: &[(ExpertInputs, Tensor)]) -> Result<f64> {
        let w = self.prepare();
        let mut total = 0.0;
        for (inputs, target) in batch {
            let streams = inputs.to_streams();
            w.check_streams(&streams)?;
            let y = w.forward(&streams, None)?;
            let t = Mat::from_tensor(target);
            if t.data.len() != y.data.len() {
                return Err(Error::shape(&[t.rows, t.cols], &[y.rows, y.cols], "target actions"));
            }
            let se: f64 = y.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum();
            total += se / y.data.len() as f64;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Mean-squared error over a batch and its gradient w.r.t. every
    /// parameter.
    pub fn backward(&self, batch: &[(ExpertInputs, Tensor)]) -> Result<(f64, ExpertGrads)> {
        let w = self.prepare();
        let mut acc = w.zero_grads();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len().max(1) as f64;
        for (inputs, target) in batch {
            let streams = inputs.to_streams();
            w.check_streams(&streams)?;
            let target = Mat::from_tensor(target);
            if (target.rows, target.cols) != (self.config.horizon, self.config.action_dim) {
                return Err(Error::shape(
                    &[target.rows, target.cols],
                    &[self.config.horizon, self.config.action_dim],
                    "target actions",
                ));
            }
            let (l, _) = w.loss_and_backward(&streams, &target, scale, &mut acc)?;
            loss += l * scale;
        }
        Ok((
            loss,
            ExpertGrads {
                names: self.param_names(),
                values: acc.values,
            },
        ))
    }

    pub(crate) fn prepare(&self) -> PreparedExpert {
        PreparedExpert {
            config: self.config,
            query: Mat::from_tensor(&self.query_embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.tensors.iter().map(Mat::from_tensor).collect())
                .collect(),
            head_w: Mat::from_tensor(&self.head_weight),
            head_b: Mat::from_tensor(&self.head_bias).data,
        }
    }

    pub(crate) fn apply_update(&mut self, opt: &mut nn::Adam, grads: &[Vec<f64>]) {
        let mut params: Vec<&mut [f32]> = self.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        opt.step(&mut params, grads);
    }

    fn check_same_config(experts: &[ActionExpert]) -> Result<ExpertConfig> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Config("at least one expert is required".into()))?;
        if let Some(bad) = experts.iter().find(|e| e.config != first.config) {
            return Err(Error::Config(format!(
                "expert configs differ: {:?} vs {:?}",
                first.config, bad.config
            )));
        }
        Ok(first.config)
    }

    /// Elementwise mean of every parameter, heads included.
    pub fn average(experts: &[ActionExpert]) -> Result<ActionExpert> {
        Self::check_same_config(experts)?;
        let mut out = experts[0].clone();
        let sources: Vec<Vec<&Tensor>> = experts.iter().map(|e| e.tensors()).collect();
        for (i, slot) in out.tensors_mut().into_iter().enumerate() {
            let group: Vec<&Tensor> = sources.iter().map(|s| s[i]).collect();
            *slot = mean_tensors(&group);
        }
        Ok(out)
    }

    /// Rebuild a full expert from a merged trunk and one task's head.
    pub fn assemble(shared: &SharedExpert, head: &ExpertHead) -> Result<ActionExpert> {
        if shared.config != head.config || shared.head_start_l != head.start_block {
            return Err(Error::Config("shared trunk and head disagree on layout".into()));
        }
        let query_embed = match (&shared.query_embed, &head.query_embed) {
            (Some(q), None) | (None, Some(q)) => q.clone(),
            _ => return Err(Error::Config("query embedding must live in exactly one part".into())),
        };
        let mut blocks = shared.blocks.clone();
        blocks.extend(head.blocks.iter().cloned());
        Ok(ActionExpert {
            config: shared.config,
            query_embed,
            blocks,
            head_weight: head.head_weight.clone(),
            head_bias: head.head_bias.clone(),
        })
    }
}

fn config_from_meta(map: &NamedTensorMap) -> Result<ExpertConfig> {
    let raw = map
        .meta("config")
        .ok_or_else(|| Error::Config("checkpoint lacks expert config metadata".into()))?;
    let cfg: ExpertConfig = serde_json::from_str(raw)?;
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn mean_tensors(group: &[&Tensor]) -> Tensor {
    let n = group.len() as f64;
    let mut column = vec![0f32; group.len()];
    let data = (0..group[0].len())
        .map(|i| {
            for (c, t) in column.iter_mut().zip(group) {
                *c = t.data()[i];
            }
            column.sort_unstable_by(f32::total_cmp);
            (column.iter().map(|&v| f64::from(v)).sum::<f64>() / n) as f32
        })
        .collect();
    Tensor::new(group[0].shape().to_vec(), data).expect("mean of finite values")
}

fn to_tensor(m: &Mat, what: &str) -> Result<Tensor> {
    Tensor::from_computed(
        &[m.rows, m.cols],
        m.data.iter().map(|&v| v as f32).collect(),
        what,
    )
}

/// f64 copy of an expert's weights, built once per optimizer step.
pub(crate) struct PreparedExpert {
    pub config: ExpertConfig,
    pub query: Mat,
    pub blocks: Vec<Vec<Mat>>,
    pub head_w: Mat,
    pub head_b: Vec<f64>,
}

pub(crate) struct GradAcc {
    pub values: Vec<Vec<f64>>,
}

struct BlockCache {
    gated: Mat,
    ln_t: LayerNormCache,
    u_t: Mat,
    attn_t: AttnCache,
    ln_a: LayerNormCache,
    u_a: Mat,
    attn_a: AttnCache,
    ln_f: LayerNormCache,
    u_f: Mat,
    pre_ff: Mat,
    act_ff: Mat,
}

pub(crate) struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_state: Mat,
}

impl PreparedExpert {
    fn attn(&self, b: usize, base: usize) -> AttnWeights<'_> {
        let w = &self.blocks[b];
        AttnWeights {
            q: &w[base + Q],
            k: &w[base + K],
            v: &w[base + V],
            o: &w[base + O],
        }
    }

    pub fn check_streams(&self, s: &Streams) -> Result<()> {
        let l = self.config.num_blocks;
        if s.task.len() != l || s.action.len() != l {
            return Err(Error::Config(format!(
                "expected {l} conditioning streams per path, got {} task / {} action",
                s.task.len(),
                s.action.len()
            )));
        }
        for m in s.task.iter().chain(&s.action) {
            if m.cols != self.config.d_model || m.rows == 0 {
                return Err(Error::shape(
                    &[m.rows, m.cols],
                    &[m.rows.max(1), self.config.d_model],
                    "conditioning stream",
                ));
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> GradAcc {
        let mut values = vec![vec![0.0; self.query.data.len()]];
        for b in &self.blocks {
            values.extend(b.iter().map(|m| vec![0.0; m.data.len()]));
        }
        values.push(vec![0.0; self.head_w.data.len()]);
        values.push(vec![0.0; self.head_b.len()]);
        GradAcc { values }
    }

    /// Final query-token states after `blocks`, optionally caching.
    fn run_blocks(&self, s: &Streams, mut cache: Option<&mut Vec<BlockCache>>) -> Result<Mat> {
        let h = self.config.n_heads;
        let mut x = self.query.clone();
        for (b, w) in self.blocks.iter().enumerate() {
            let gated = s.task[b].map(nn::sigmoid);
            let (u_t, ln_t) = layer_norm(&x, &w[idx::LN_T_G].data, &w[idx::LN_T_B].data);
            let (a_t, attn_t) = cross_attention(&u_t, &gated, &self.attn(b, idx::ATTN_T), h);
            let x_t = x.added(&a_t);
            let (u_a, ln_a) = layer_norm(&x_t, &w[idx::LN_A_G].data, &w[idx::LN_A_B].data);
            let (a_a, attn_a) = cross_attention(&u_a, &s.action[b], &self.attn(b, idx::ATTN_A), h);
            let x_a = x_t.added(&a_a);
            let (u_f, ln_f) = layer_norm(&x_a, &w[idx::LN_F_G].data, &w[idx::LN_F_B].data);
            let pre_ff = linear_bias(&u_f, &w[idx::W1], &w[idx::B1].data);
            let act_ff = pre_ff.map(nn::gelu);
            let ff = linear_bias(&act_ff, &w[idx::W2], &w[idx::B2].data);
            let x_out = x_a.added(&ff);
            if !x_out.all_finite() {
                return Err(Error::NonFiniteActivation { block: b + 1 });
            }
            if let Some(c) = cache.as_deref_mut() {
                c.push(BlockCache {
                    gated,
                    ln_t,
                    u_t,
                    attn_t,
                    ln_a,
                    u_a,
                    attn_a,
                    ln_f,
                    u_f,
                    pre_ff,
                    act_ff,
                });
            }
            x = x_out;
        }
        Ok(x)
    }

    pub fn forward(&self, s: &Streams, cache: Option<&mut ForwardCache>) -> Result<Mat> {
        match cache {
            Some(c) => {
                c.blocks.clear();
                let x = self.run_blocks(s, Some(&mut c.blocks))?;
                let y = linear_bias(&x, &self.head_w, &self.head_b);
                c.final_state = x;
                Ok(y)
            }
            None => {
                let x = self.run_blocks(s, None)?;
                Ok(linear_bias(&x, &self.head_w, &self.head_b))
            }
        }
    }

    /// Loss for one sample; accumulates `scale ×` parameter gradients and
    /// returns the unscaled loss with `scale ×` input-stream gradients.
    pub fn loss_and_backward(
        &self,
        s: &Streams,
        target: &Mat,
        scale: f64,
        acc: &mut GradAcc,
    ) -> Result<(f64, Streams)> {
        let mut cache = ForwardCache {
            blocks: Vec::new(),
            final_state: Mat::zeros(0, 0),
        };
        let y = self.forward(s, Some(&mut cache))?;
        let n = y.data.len() as f64;
        let mut dy = Mat::zeros(y.rows, y.cols);
        let mut loss = 0.0;
        for i in 0..y.data.len() {
            let diff = y.data[i] - target.data[i];
            loss += diff * diff;
            dy.data[i] = 2.0 * diff / n * scale;
        }
        let grads = self.backward_from(&dy, s, &cache, acc);
        Ok((loss / n, grads))
    }

    /// Backpropagate `dy` (gradient of the output chunk).
    pub fn backward_from(&self, dy: &Mat, s: &Streams, cache: &ForwardCache, acc: &mut GradAcc) -> Streams {
        let h = self.config.n_heads;
        let nb = self.blocks.len();
        let head_idx = acc.values.len() - 2;
        {
            let mut dw = Mat::zeros(self.head_w.rows, self.head_w.cols);
            nn::accumulate_tn(&mut dw, dy, &cache.final_state);
            add_into(&mut acc.values[head_idx], &dw.data);
            add_into(&mut acc.values[head_idx + 1], &dy.sum_rows());
        }
        let mut dx = nn::matmul(dy, &self.head_w);
        let mut d_task = vec![Mat::zeros(0, 0); nb];
        let mut d_action = vec![Mat::zeros(0, 0); nb];
        for b in (0..nb).rev() {
            let w = &self.blocks[b];
            let c = &cache.blocks[b];
            let g0 = 1 + b * BLOCK_PARAMS.len();
            let mut local: Vec<Mat> = w.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();

            // feed-forward
            nn::accumulate_tn(&mut local[idx::W2], &dx, &c.act_ff);
            local[idx::B2].data = dx.sum_rows();
            let dact = nn::matmul(&dx, &w[idx::W2]);
            let mut dpre = dact;
            for (d, &p) in dpre.data.iter_mut().zip(&c.pre_ff.data) {
                *d *= nn::gelu_grad(p);
            }
            nn::accumulate_tn(&mut local[idx::W1], &dpre, &c.u_f);
            local[idx::B1].data = dpre.sum_rows();
            let du_f = nn::matmul(&dpre, &w[idx::W1]);
            let (mut dg, mut db) = (vec![0.0; du_f.cols], vec![0.0; du_f.cols]);
            let dxa_ln = layer_norm_backward(&du_f, &c.ln_f, &w[idx::LN_F_G].data, &mut dg, &mut db);
            local[idx::LN_F_G].data = dg;
            local[idx::LN_F_B].data = db;
            let dx_a = dx.added(&dxa_ln);

            // action-stream attention
            let mut ga = AttnGrads::zeros(self.config.d_model, self.config.d_model, self.config.d_model);
            let (du_a, dctx_a) = cross_attention_backward(
                &dx_a,
                &c.u_a,
                &s.action[b],
                &self.attn(b, idx::ATTN_A),
                &c.attn_a,
                h,
                &mut ga,
            );
            local[idx::ATTN_A + Q] = ga.dq;
            local[idx::ATTN_A + K] = ga.dk;
            local[idx::ATTN_A + V] = ga.dv;
            local[idx::ATTN_A + O] = ga.do_;
            let (mut dg, mut db) = (vec![0.0; du_a.cols], vec![0.0; du_a.cols]);
            let dxt_ln = layer_norm_backward(&du_a, &c.ln_a, &w[idx::LN_A_G].data, &mut dg, &mut db);
            local[idx::LN_A_G].data = dg;
            local[idx::LN_A_B].data = db;
            let dx_t = dx_a.added(&dxt_ln);

            // gated task-stream attention
            let mut gt = AttnGrads::zeros(self.config.d_model, self.config.d_model, self.config.d_model);
            let (du_t, dgated) = cross_attention_backward(
                &dx_t,
                &c.u_t,
                &c.gated,
                &self.attn(b, idx::ATTN_T),
                &c.attn_t,
                h,
                &mut gt,
            );
            local[idx::ATTN_T + Q] = gt.dq;
            local[idx::ATTN_T + K] = gt.dk;
            local[idx::ATTN_T + V] = gt.dv;
            local[idx::ATTN_T + O] = gt.do_;
            let (mut dg, mut db) = (vec![0.0; du_t.cols], vec![0.0; du_t.cols]);
            let dxin_ln = layer_norm_backward(&du_t, &c.ln_t, &w[idx::LN_T_G].data, &mut dg, &mut db);
            local[idx::LN_T_G].data = dg;
            local[idx::LN_T_B].data = db;
            dx = dx_t.added(&dxin_ln);

            let mut dtask = dgated;
            for (d, &g) in dtask.data.iter_mut().zip(&c.gated.data) {
                *d *= g * (1.0 - g);
            }
            d_task[b] = dtask;
            d_action[b] = dctx_a;
            for (k, m) in local.into_iter().enumerate() {
                add_into(&mut acc.values[g0 + k], &m.data);
            }
        }
        add_into(&mut acc.values[0], &dx.data);
        Streams {
            task: d_task,
            action: d_action,
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Averaged trunk: blocks `1..l-1` (and the query embedding when `l ≥ 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct SharedExpert {
    pub config: ExpertConfig,
    pub head_start_l: usize,
    pub query_embed: Option<Tensor>,
    pub blocks: Vec<ExpertBlock>,
}

/// Unmerged per-task blocks `l..L` plus output head. Holds the query
/// embedding only when `l == 1`, i.e. nothing is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertHead {
    pub config: ExpertConfig,
    pub start_block: usize,
    pub query_embed: Option<Tensor>,
    pub blocks: Vec<ExpertBlock>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub task_id: String,
}

fn blocks_to_map(map: &mut NamedTensorMap, blocks: &[ExpertBlock], first_index: usize) {
    for (offset, b) in blocks.iter().enumerate() {
        for (p, t) in BLOCK_PARAMS.iter().zip(&b.tensors) {
            map.insert(format!("block{}.{p}", first_index + offset), t.clone())
                .expect("unique block names");
        }
    }
}

fn blocks_from_map(
    map: &NamedTensorMap,
    cfg: &ExpertConfig,
    indices: std::ops::RangeInclusive<usize>,
) -> Result<Vec<ExpertBlock>> {
    let shapes = ExpertBlock::shapes(cfg);
    indices
        .map(|i| {
            let tensors = BLOCK_PARAMS
                .iter()
                .zip(&shapes)
                .map(|(p, shape)| {
                    let name = format!("block{i}.{p}");
                    let t = map.require(&name)?;
                    if t.shape() != shape.as_slice() {
                        return Err(Error::shape(shape, t.shape(), name));
                    }
                    Ok(t.clone())
                })
                .collect::<Result<_>>()?;
            Ok(ExpertBlock { tensors })
        })
        .collect()
}

impl SharedExpert {
    pub fn to_map(&self) -> NamedTensorMap {
        let mut m = NamedTensorMap::new();
        if let Some(q) = &self.query_embed {
            m.insert("embed.query", q.clone()).expect("name");
        }
        blocks_to_map(&mut m, &self.blocks, 1);
        m.with_meta(KIND_KEY, "shared_expert")
            .with_meta("head_start_l", self.head_start_l.to_string())
            .with_meta("config", serde_json::to_string(&self.config).expect("config"))
    }

    pub fn from_map(map: &NamedTensorMap) -> Result<Self> {
        let config = config_from_meta(map)?;
        let l = parse_l(map)?;
        Ok(Self {
            config,
            head_start_l: l,
            query_embed: map.get("embed.query").cloned(),
            blocks: blocks_from_map(map, &config, 1..=l - 1)?,
        })
    }
}

impl ExpertHead {
    pub fn to_map(&self) -> NamedTensorMap {
        let mut m = NamedTensorMap::new();
        if let Some(q) = &self.query_embed {
            m.insert("embed.query", q.clone()).expect("name");
        }
        blocks_to_map(&mut m, &self.blocks, self.start_block);
        m.insert("head.weight", self.head_weight.clone()).expect("name");
        m.insert("head.bias", self.head_bias.clone()).expect("name");
        m.with_meta(KIND_KEY, "expert_head")
            .with_meta("head_start_l", self.start_block.to_string())
            .with_meta(TASK_ID_KEY, &self.task_id)
            .with_meta("config", serde_json::to_string(&self.config).expect("config"))
    }

    pub fn from_map(map: &NamedTensorMap) -> Result<Self> {
        let config = config_from_meta(map)?;
        let l = parse_l(map)?;
        Ok(Self {
            config,
            start_block: l,
            query_embed: map.get("embed.query").cloned(),
            blocks: blocks_from_map(map, &config, l..=config.num_blocks)?,
            head_weight: map.require("head.weight")?.clone(),
            head_bias: map.require("head.bias")?.clone(),
            task_id: map.meta(TASK_ID_KEY).unwrap_or_default().to_string(),
        })
    }
}

fn parse_l(map: &NamedTensorMap) -> Result<usize> {
    map.meta("head_start_l")
        .and_then(|s| s.parse().ok())
        .filter(|&l| l >= 1)
        .ok_or_else(|| Error::Config("missing or invalid head_start_l metadata".into()))
}

/// Average blocks `1..l-1` across experts and keep blocks `l..L` plus the
/// output head per task.
pub fn merge_experts(
    experts: &[ActionExpert],
    task_ids: &[String],
    head_start_l: usize,
) -> Result<(SharedExpert, Vec<ExpertHead>)> {
    let config = ActionExpert::check_same_config(experts)?;
    if task_ids.len() != experts.len() {
        return Err(Error::Config(format!(
            "{} experts but {} task ids",
            experts.len(),
            task_ids.len()
        )));
    }
    if head_start_l < 1 || head_start_l > config.num_blocks {
        return Err(Error::Config(format!(
            "head_start_l {head_start_l} outside 1..={}",
            config.num_blocks
        )));
    }
    let shared_blocks = (0..head_start_l - 1)
        .map(|b| ExpertBlock {
            tensors: (0..BLOCK_PARAMS.len())
                .map(|p| {
                    let group: Vec<&Tensor> = experts.iter().map(|e| &e.blocks[b].tensors[p]).collect();
                    mean_tensors(&group)
                })
                .collect(),
        })
        .collect();
    let shared_query = (head_start_l >= 2).then(|| {
        let group: Vec<&Tensor> = experts.iter().map(|e| &e.query_embed).collect();
        mean_tensors(&group)
    });
    let shared = SharedExpert {
        config,
        head_start_l,
        query_embed: shared_query,
        blocks: shared_blocks,
    };
    let heads = experts
        .iter()
        .zip(task_ids)
        .map(|(e, id)| ExpertHead {
            config,
            start_block: head_start_l,
            query_embed: (head_start_l == 1).then(|| e.query_embed.clone()),
            blocks: e.blocks[head_start_l - 1..].to_vec(),
            head_weight: e.head_weight.clone(),
            head_bias: e.head_bias.clone(),
            task_id: id.clone(),
        })
        .collect();
    Ok((shared, heads))
}

/// Per block, mean over unordered expert pairs of
/// `‖θ_a − θ_b‖ / (½‖θ_a‖ + ½‖θ_b‖)` with the block's parameters flattened.
pub fn block_distance(experts: &[ActionExpert]) -> Result<Vec<f64>> {
    let config = ActionExpert::check_same_config(experts)?;
    if experts.len() < 2 {
        return Err(Error::Config("block distance needs at least two experts".into()));
    }
    Ok((0..config.num_blocks)
        .map(|b| {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..experts.len() {
                for j in i + 1..experts.len() {
                    let (x, y) = (&experts[i].blocks[b], &experts[j].blocks[b]);
                    let diff: f64 = x
                        .tensors
                        .iter()
                        .zip(&y.tensors)
                        .flat_map(|(a, c)| a.data().iter().zip(c.data()))
                        .map(|(&p, &q)| {
                            let d = f64::from(p) - f64::from(q);
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt();
                    let denom = 0.5 * x.flat_norm_sq().sqrt() + 0.5 * y.flat_norm_sq().sqrt();
                    total += if denom > 0.0 { diff / denom } else { 0.0 };
                    pairs += 1;
                }
            }
            total / pairs as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExpertConfig {
        ExpertConfig {
            num_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            action_dim: 6,
            horizon: 4,
        }
    }

    fn random_inputs(cfg: &ExpertConfig, tokens: (usize, usize), rng: &mut ChaCha8Rng, scale: f32) -> ExpertInputs {
        let mut draw = |n: usize| {
            let data = (0..n * cfg.d_model).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::new(vec![n, cfg.d_model], data).unwrap()
        };
        ExpertInputs {
            task: (0..cfg.num_blocks).map(|_| draw(tokens.0)).collect(),
            action: (0..cfg.num_blocks).map(|_| draw(tokens.1)).collect(),
        }
    }

    #[test]
    fn output_shape_contract() {
        let e = ActionExpert::init(cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = e.forward(&random_inputs(&cfg(), (3, 2), &mut rng, 1.0)).unwrap();
        assert_eq!(y.shape(), &[4, 6]);
    }

    #[test]
    fn zero_streams_give_finite_output() {
        let e = ActionExpert::init(cfg(), 1).unwrap();
        let zeros = |n| Tensor::zeros(&[n, 8]);
        let inputs = ExpertInputs {
            task: vec![zeros(3), zeros(3)],
            action: vec![zeros(2), zeros(2)],
        };
        let y = e.forward(&inputs).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        let neg = ExpertInputs {
            task: inputs.task.iter().map(|t| t.scale(-1.0).unwrap()).collect(),
            ..inputs.clone()
        };
        assert_eq!(e.forward(&neg).unwrap(), y);
    }

    #[test]
    fn rejects_wrong_stream_count() {
        let e = ActionExpert::init(cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inputs = random_inputs(&cfg(), (3, 2), &mut rng, 1.0);
        inputs.task.pop();
        assert!(e.forward(&inputs).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.horizon = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let e = ActionExpert::init(cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = random_inputs(&cfg(), (3, 2), &mut rng, 1.0);
        let y = e.forward(&inputs).unwrap();
        let (loss, g) = e.backward(&[(inputs, y)]).unwrap();
        assert!(loss < 1e-12);
        assert!(g.max_abs() < 1e-7, "{}", g.max_abs());
    }

    #[test]
    fn merge_with_opposite_first_blocks_is_zero() {
        let a = ActionExpert::init(cfg(), 5).unwrap();
        let mut b = a.clone();
        for t in &mut b.blocks[0].tensors {
            *t = t.scale(-1.0).unwrap();
        }
        let (shared, heads) = merge_experts(&[a.clone(), b], &["a".into(), "b".into()], 2).unwrap();
        assert!(shared.blocks[0].tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(heads[0].blocks[0], a.blocks[1]);
    }

    #[test]
    fn head_start_one_merges_nothing() {
        let a = ActionExpert::init(cfg(), 5).unwrap();
        let b = ActionExpert::init(cfg(), 6).unwrap();
        let (shared, heads) = merge_experts(&[a.clone(), b.clone()], &["a".into(), "b".into()], 1).unwrap();
        assert!(shared.blocks.is_empty() && shared.query_embed.is_none());
        assert_eq!(ActionExpert::assemble(&shared, &heads[0]).unwrap(), a);
        assert_eq!(ActionExpert::assemble(&shared, &heads[1]).unwrap(), b);
    }

    #[test]
    fn merge_bounds_checked() {
        let a = ActionExpert::init(cfg(), 5).unwrap();
        assert!(merge_experts(&[a.clone()], &["a".into()], 0).is_err());
        assert!(merge_experts(&[a.clone()], &["a".into()], 3).is_err());
        let mut other = cfg();
        other.d_ff = 8;
        let b = ActionExpert::init(other, 5).unwrap();
        assert!(merge_experts(&[a, b], &["a".into(), "b".into()], 2).is_err());
    }

    #[test]
    fn block_distance_hand_example() {
        let c = ExpertConfig { num_blocks: 1, d_model: 2, n_heads: 1, d_ff: 1, action_dim: 1, horizon: 1 };
        let mut a = ActionExpert::init(c, 0).unwrap();
        let mut b = a.clone();
        // Only one non-zero parameter per expert: [1, 0] vs [0, 1] in flattened form.
        for t in a.blocks[0].tensors.iter_mut().chain(b.blocks[0].tensors.iter_mut()) {
            *t = Tensor::zeros(t.shape());
        }
        a.blocks[0].tensors[0] = Tensor::vector(&[1.0, 0.0]).unwrap();
        b.blocks[0].tensors[0] = Tensor::vector(&[0.0, 1.0]).unwrap();
        let d = block_distance(&[a.clone(), b]).unwrap();
        assert!((d[0] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(block_distance(&[a.clone(), a]).unwrap(), vec![0.0]);
    }

    #[test]
    fn map_round_trips() {
        let e = ActionExpert::init(cfg(), 9).unwrap();
        assert_eq!(ActionExpert::from_map(&e.to_map()).unwrap(), e);
        let (shared, heads) = merge_experts(&[e.clone()], &["t".into()], 2).unwrap();
        assert_eq!(SharedExpert::from_map(&shared.to_map()).unwrap(), shared);
        assert_eq!(ExpertHead::from_map(&heads[0].to_map()).unwrap(), heads[0]);
        assert_eq!(ActionExpert::assemble(&shared, &heads[0]).unwrap(), e);
    }
}
