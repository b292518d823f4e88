//! Desk-scale multi-task harness: pretrain a small backbone, finetune
//! per-task adapters and action experts, then merge, mask, route and score.

mod backbone;
mod pipeline;
mod tasks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backbone::{BackboneConfig, ADAPTED, EMBED, QUERY};
pub use pipeline::{
    act, adversarial_k_ablation, progressive_merge_eval, route_observation, run_pipeline, write_block_distance, write_mask_stats,
    AblationReport, LambdaSweepRow, MetricRow, PipelineReport, RoutingRow, Variant,
};
pub use tasks::{distance, gen_tasks, TaskFamilyConfig, ToyTask};

use crate::error::{Error, Result};
use crate::expert::{ActionExpert, ExpertConfig};
use crate::merge::{MergeMethod, MergeRecipe, DEFAULT_ALPHA, DEFAULT_KEEP_FRACTION, DEFAULT_LAMBDA};
use crate::nn::{Adam, Mat};
use crate::router::{SubspaceKind, DEFAULT_K_R};
use crate::task_vector::materialize;
use crate::tensor::NamedTensorMap;
use backbone::{add_into, Adapter, Backbone};

/// Independent seed for a named component.
pub(crate) fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_tokens: usize,
    pub n_action_queries: usize,
    /// Blocks in both the backbone and the action expert.
    pub num_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub lora_rank: usize,
    pub lora_scaling: f64,
    /// Draw every task's adapter `up` factors from one seed.
    pub shared_adapter_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_tokens: 4,
            n_action_queries: 1,
            num_blocks: 2,
            n_heads: 2,
            d_ff: 32,
            horizon: 4,
            action_dim: 2,
            lora_rank: 4,
            lora_scaling: 1.0,
            shared_adapter_init: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub weight_decay: f64,
    pub finetune_steps: usize,
    pub adapter_lr: f64,
    pub expert_lr: f64,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 1500,
            pretrain_lr: 3e-3,
            weight_decay: 1e-3,
            finetune_steps: 1500,
            adapter_lr: 3e-3,
            expert_lr: 2e-3,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSettings {
    pub method: MergeMethod,
    pub alpha: f32,
    pub ties_keep_fraction: f32,
    pub lambda: f32,
    /// First unmerged expert block; defaults to the last block.
    pub head_start_l: Option<usize>,
    pub k_r: usize,
    pub subspace: SubspaceKind,
}

impl Default for MergeSettings {
    fn default() -> Self {
        Self {
            method: MergeMethod::TaskArithmetic,
            alpha: DEFAULT_ALPHA,
            ties_keep_fraction: DEFAULT_KEEP_FRACTION,
            lambda: DEFAULT_LAMBDA,
            head_start_l: None,
            k_r: DEFAULT_K_R,
            subspace: SubspaceKind::V,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    pub episode_length: usize,
    /// An episode counts as a success when its MSE is at most this.
    pub success_threshold: f64,
    pub lambda_grid: Vec<f32>,
    /// Task whose remaining blocks are kept in the progressive merge sweep.
    pub reference_task: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_task: 25,
            episode_length: 4,
            success_threshold: 0.1,
            lambda_grid: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            reference_task: 0,
        }
    }
}

/// Full harness configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub num_tasks: usize,
    pub tasks: TaskFamilyConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub merge: MergeSettings,
    pub eval: EvalConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_tasks: 4,
            tasks: TaskFamilyConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            merge: MergeSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ToyConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.expert_config().validate()?;
        let m = &self.model;
        if m.n_tokens == 0 || m.n_action_queries == 0 || m.lora_rank == 0 {
            return Err(Error::Config("token counts and lora_rank must be positive".into()));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval.episodes_per_task == 0 || self.eval.episode_length == 0 {
            return Err(Error::Config("episodes_per_task and episode_length must be positive".into()));
        }
        if self.num_tasks == 0 || self.num_tasks > self.tasks.channel_groups {
            return Err(Error::Config(format!(
                "num_tasks must be in 1..={} (one channel group each)",
                self.tasks.channel_groups
            )));
        }
        if self.eval.reference_task >= self.num_tasks {
            return Err(Error::Config("reference_task out of range".into()));
        }
        self.recipe((0..self.num_tasks).map(|i| format!("task{i}")).collect()).validate()?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            obs_dim: self.tasks.obs_dim(),
            d_model: self.model.d_model,
            n_tokens: self.model.n_tokens,
            n_action_queries: self.model.n_action_queries,
            num_blocks: self.model.num_blocks,
        }
    }

    pub fn expert_config(&self) -> ExpertConfig {
        ExpertConfig {
            num_blocks: self.model.num_blocks,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            action_dim: self.model.action_dim,
            horizon: self.model.horizon,
        }
    }

    pub fn head_start_l(&self) -> usize {
        self.merge.head_start_l.unwrap_or(self.model.num_blocks)
    }

    pub fn recipe(&self, task_ids: Vec<String>) -> MergeRecipe {
        MergeRecipe {
            method: self.merge.method,
            alpha: self.merge.alpha,
            ties_keep_fraction: self.merge.ties_keep_fraction,
            lambda: self.merge.lambda,
            head_start_l: Some(self.head_start_l()),
            task_ids,
        }
    }

    /// Backbone weights before pretraining.
    pub fn initial_backbone(&self) -> NamedTensorMap {
        self.backbone_config().init(derive_seed(self.seed, "backbone-init", 0))
    }

    pub fn tasks(&self) -> Result<Vec<ToyTask>> {
        gen_tasks(self.num_tasks, self.seed, self.tasks, self.model.action_dim, self.model.horizon)
    }
}

/// Width of the generic pretraining target.
const PRETRAIN_OUT: usize = 8;

/// Generic target read from the shared channels only.
struct PretrainTarget {
    lin: Vec<f64>,
    freq: Vec<f64>,
    common_dim: usize,
}

impl PretrainTarget {
    fn new(common_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain-target", 0));
        let n = PRETRAIN_OUT * common_dim;
        let s = 1.0 / (common_dim.max(1) as f64).sqrt();
        Self {
            lin: (0..n).map(|_| rng.random_range(-s..s)).collect(),
            freq: (0..n).map(|_| rng.random_range(-s..s)).collect(),
            common_dim,
        }
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let c = self.common_dim;
        (0..PRETRAIN_OUT)
            .map(|o| {
                let l: f64 = (0..c).map(|j| self.lin[o * c + j] * x[j]).sum();
                let f: f64 = (0..c).map(|j| self.freq[o * c + j] * x[j]).sum();
                l + 0.3 * f.sin()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainResult {
    pub theta_0: NamedTensorMap,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn sample_mixture(tasks: &[ToyTask], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let t = &tasks[rng.random_range(0..tasks.len())];
    t.sample_obs(rng)
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

/// Train every backbone tensor on the observation mixture against a generic
/// target of the shared channels; the trained weights become `Θ_0`.
pub fn pretrain_backbone(cfg: &ToyConfig, tasks: &[ToyTask]) -> Result<PretrainResult> {
    if tasks.is_empty() {
        return Err(Error::Config("pretraining needs at least one task".into()));
    }
    let bcfg = cfg.backbone_config();
    let seed = cfg.seed;
    let mut theta = cfg.initial_backbone();
    let target = PretrainTarget::new(cfg.tasks.common_dim, seed);
    let qd = bcfg.n_action_queries * bcfg.d_model;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "readout-init", 0));
    let mut readout = Mat::from_tensor(&crate::expert::uniform_fan_in(&[PRETRAIN_OUT, qd], &mut init_rng));
    let mut readout_b = vec![0.0; PRETRAIN_OUT];
    let mut held_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain-heldout", 0));
    let held: Vec<Vec<f64>> = (0..256).map(|_| sample_mixture(tasks, &mut held_rng)).collect();

    let eval = |theta: &NamedTensorMap, readout: &Mat, rb: &[f64]| -> Result<f64> {
        let bb = Backbone::from_map(bcfg, theta)?;
        let mut total = 0.0;
        for x in &held {
            let tr = bb.forward(x);
            let flat = Mat::from_vec(1, qd, tr.a[bcfg.num_blocks].data.clone());
            let y = crate::nn::linear_bias(&flat, readout, rb);
            let z = target.eval(x);
            total += y.data.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / PRETRAIN_OUT as f64;
        }
        Ok(total / held.len() as f64)
    };
    let initial_loss = eval(&theta, &readout, &readout_b)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain-batches", 0));
    let mut opt = Adam::new(cfg.training.pretrain_lr);
    let mut ropt = Adam::new(cfg.training.pretrain_lr);
    let bsz = cfg.training.batch_size;
    let wd = cfg.training.weight_decay;
    for step in 0..cfg.training.pretrain_steps {
        let bb = Backbone::from_map(bcfg, &theta)?;
        let mut g = bb.zero_grads();
        let mut gr = vec![0.0; readout.data.len()];
        let mut grb = vec![0.0; PRETRAIN_OUT];
        let mut loss = 0.0;
        for _ in 0..bsz {
            let x = sample_mixture(tasks, &mut rng);
            let tr = bb.forward(&x);
            let a_l = &tr.a[bcfg.num_blocks];
            let flat = Mat::from_vec(1, qd, a_l.data.clone());
            let y = crate::nn::linear_bias(&flat, &readout, &readout_b);
            let z = target.eval(&x);
            let scale = 2.0 / (PRETRAIN_OUT * bsz) as f64;
            let dy: Vec<f64> = y.data.iter().zip(&z).map(|(a, b)| (a - b) * scale).collect();
            loss += y.data.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (PRETRAIN_OUT * bsz) as f64;
            for o in 0..PRETRAIN_OUT {
                for j in 0..qd {
                    gr[o * qd + j] += dy[o] * flat.data[j];
                }
            }
            add_into(&mut grb, &dy);
            let da_flat = crate::nn::matmul(&Mat::from_vec(1, PRETRAIN_OUT, dy), &readout);
            let mut da_tap = vec![Mat::zeros(0, 0); bcfg.num_blocks];
            da_tap[bcfg.num_blocks - 1] = Mat::from_vec(a_l.rows, a_l.cols, da_flat.data);
            bb.backward(&tr, &[], &da_tap, &mut g);
        }
        check_finite(loss, step)?;
        let names: Vec<String> = bcfg.param_shapes().into_iter().map(|(n, _)| n).collect();
        for (gv, name) in g.iter_mut().zip(&names) {
            if !name.ends_with("bias") {
                let p = theta.get(name).expect("param");
                for (gi, &pv) in gv.iter_mut().zip(p.data()) {
                    *gi += 2.0 * wd * f64::from(pv);
                }
            }
        }
        let mut tensors: Vec<crate::Tensor> = names.iter().map(|n| theta.get(n).expect("param").clone()).collect();
        {
            let mut slices: Vec<&mut [f32]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
            opt.step(&mut slices, &g);
        }
        for (n, t) in names.iter().zip(tensors) {
            theta.replace(n, t)?;
        }
        let mut rparams: Vec<&mut [f64]> = vec![&mut readout.data, &mut readout_b];
        ropt.step_f64(&mut rparams, &[gr, grb]);
    }
    let final_loss = eval(&theta, &readout, &readout_b)?;
    check_finite(final_loss, cfg.training.pretrain_steps)?;
    Ok(PretrainResult {
        theta_0: theta,
        initial_loss,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneResult {
    pub task_id: String,
    /// Only the adapted tensors, each `Θ_0 + materialized update`.
    pub theta_m: NamedTensorMap,
    pub expert: ActionExpert,
    pub adapters: Vec<crate::task_vector::LowRankUpdate>,
    /// Held-out MSE of the untrained expert on `Θ_0`.
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Per-sample forward of backbone + expert; returns the flat action chunk.
pub(crate) fn predict(bb: &Backbone, expert: &crate::expert::PreparedExpert, x: &[f64]) -> Result<Vec<f64>> {
    let tr = bb.forward(x);
    let streams = crate::expert::Streams {
        task: tr.s[1..].to_vec(),
        action: tr.a[1..].to_vec(),
    };
    Ok(expert.forward(&streams, None)?.data)
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn heldout(task: &ToyTask, seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "finetune-heldout", task.index as u64));
    (0..n).map(|_| task.sample_obs(&mut rng)).collect()
}

/// Train low-rank adapters on the two adapted backbone tensors jointly with
/// a freshly initialized action expert. All experts share one
/// initialization; adapters and data streams are seeded per task.
pub fn finetune_task(cfg: &ToyConfig, theta_0: &NamedTensorMap, task: &ToyTask) -> Result<FinetuneResult> {
    let bcfg = cfg.backbone_config();
    let seed = cfg.seed;
    let mut bb = Backbone::from_map(bcfg, theta_0)?;
    let base_embed = bb.embed_matrix().clone();
    let base_query = bb.query_matrix().clone();
    let adapter_stream = if cfg.model.shared_adapter_init { 0 } else { task.index as u64 + 1 };
    let mut arng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "adapter-init", adapter_stream));
    let r = cfg.model.lora_rank;
    let s = cfg.model.lora_scaling;
    let mut adapters = vec![
        Adapter::init(EMBED, base_embed.rows, base_embed.cols, r, s, &mut arng),
        Adapter::init(QUERY, base_query.rows, base_query.cols, r, s, &mut arng),
    ];
    for a in &adapters {
        if r > a.up.rows.min(a.down.cols) {
            return Err(Error::Config(format!("lora_rank {r} too large for `{}`", a.target)));
        }
    }
    let mut expert = ActionExpert::init(cfg.expert_config(), derive_seed(seed, "expert-init", 0))?;
    let held = heldout(task, seed, 128);
    let eval = |bb: &Backbone, expert: &ActionExpert| -> Result<f64> {
        let w = expert.prepare();
        let mut total = 0.0;
        for x in &held {
            total += mse(&predict(bb, &w, x)?, &task.target(x));
        }
        Ok(total / held.len() as f64)
    };
    let initial_mse = eval(&bb, &expert)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "finetune-batches", task.index as u64));
    let mut eopt = Adam::new(cfg.training.expert_lr);
    let mut aopt = Adam::new(cfg.training.adapter_lr);
    let bsz = cfg.training.batch_size;
    let (h, ad) = (cfg.model.horizon, cfg.model.action_dim);
    for step in 0..cfg.training.finetune_steps {
        bb.set_adapted(&base_embed, &base_query, &adapters);
        let w = expert.prepare();
        let mut acc = w.zero_grads();
        let mut g = bb.zero_grads();
        let mut loss = 0.0;
        for _ in 0..bsz {
            let x = task.sample_obs(&mut rng);
            let tr = bb.forward(&x);
            let streams = crate::expert::Streams {
                task: tr.s[1..].to_vec(),
                action: tr.a[1..].to_vec(),
            };
            let target = Mat::from_vec(h, ad, task.target(&x));
            let (l, dstreams) = w.loss_and_backward(&streams, &target, 1.0 / bsz as f64, &mut acc)?;
            loss += l / bsz as f64;
            bb.backward(&tr, &dstreams.task, &dstreams.action, &mut g);
        }
        check_finite(loss, step)?;
        expert.apply_update(&mut eopt, &acc.values);
        let (ue, de) = adapters[0].grads(&Mat::from_vec(base_embed.rows, base_embed.cols, std::mem::take(&mut g[0])));
        let (uq, dq) = adapters[1].grads(&Mat::from_vec(base_query.rows, base_query.cols, std::mem::take(&mut g[2])));
        let (a0, a1) = adapters.split_at_mut(1);
        let mut params: Vec<&mut [f64]> = vec![
            &mut a0[0].up.data,
            &mut a0[0].down.data,
            &mut a1[0].up.data,
            &mut a1[0].down.data,
        ];
        aopt.step_f64(&mut params, &[ue, de, uq, dq]);
    }

    let mut theta_m = NamedTensorMap::new();
    let mut updates = Vec::new();
    for a in &adapters {
        let lr = a.to_low_rank()?;
        let dense = materialize(&lr)?;
        theta_m.insert(a.target, theta_0.require(a.target)?.add(&dense)?)?;
        updates.push(lr);
    }
    let final_bb = {
        let mut full = theta_0.clone();
        for (name, t) in theta_m.iter() {
            full.replace(name, t.clone())?;
        }
        Backbone::from_map(bcfg, &full)?
    };
    let final_mse = eval(&final_bb, &expert)?;
    check_finite(final_mse, cfg.training.finetune_steps)?;
    Ok(FinetuneResult {
        task_id: task.task_id.clone(),
        theta_m: theta_m.with_meta(crate::task_vector::TASK_ID_KEY, &task.task_id),
        expert,
        adapters: updates,
        initial_mse,
        final_mse,
    })
}
