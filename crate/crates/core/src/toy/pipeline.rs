//! End-to-end harness run and its CSV reports.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::backbone::{pooled, Backbone};
use super::{derive_seed, finetune_task, mse, predict, pretrain_backbone, FinetuneResult, ToyConfig, ToyTask};
use crate::error::{Error, Result};
use crate::expert::{block_distance, mean_tensors, merge_experts, ActionExpert, PreparedExpert};
use crate::mask::{build_mask, mask_stats, MaskStats, TaskMask};
use crate::merge::{merge, merge_average};
use crate::router::{route, PooledHidden, RouterBundle, RoutingDecision, SubspaceKind};
use crate::task_vector::{apply, extract, TaskVector};
use crate::tensor::{NamedTensorMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Each task's own finetuned backbone and expert.
    Finetuned,
    /// Masked merged backbone and merged expert trunk with the routed head.
    MaskedRouted,
    /// Plain average of task vectors and of whole experts.
    NaiveAverage,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Finetuned, Variant::MaskedRouted, Variant::NaiveAverage];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Finetuned => "finetuned",
            Variant::MaskedRouted => "masked_routed",
            Variant::NaiveAverage => "naive_average",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub task_id: String,
    pub variant: Variant,
    pub mse: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRow {
    pub episode: usize,
    pub true_task: usize,
    pub decision: RoutingDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSweepRow {
    pub lambda: f32,
    pub mean_active_ratio: f64,
    pub selfish_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub config: ToyConfig,
    pub tasks: Vec<ToyTask>,
    pub pretrain_initial_loss: f64,
    pub pretrain_final_loss: f64,
    pub finetune: Vec<FinetuneResult>,
    pub theta_0: NamedTensorMap,
    pub task_vectors: Vec<TaskVector>,
    pub bundle: RouterBundle,
    pub metrics: Vec<MetricRow>,
    pub routing: Vec<RoutingRow>,
    pub routing_accuracy: f64,
    pub mask_stats: MaskStats,
    pub lambda_sweep: Vec<LambdaSweepRow>,
    /// Empty for a single task.
    pub block_distance: Vec<f64>,
    /// `(merged leading blocks, reference-task MSE)`; empty for a single task.
    pub progressive: Vec<(usize, f64)>,
}

impl PipelineReport {
    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    pub fn experts(&self) -> Vec<ActionExpert> {
        self.finetune.iter().map(|f| f.expert.clone()).collect()
    }

    pub fn mse(&self, task: usize, variant: Variant) -> f64 {
        let id = &self.tasks[task].task_id;
        self.metrics
            .iter()
            .find(|r| &r.task_id == id && r.variant == variant)
            .map_or(f64::NAN, |r| r.mse)
    }

    /// Per-task MSE of `variant` divided by the finetuned MSE.
    pub fn mse_ratios(&self, variant: Variant) -> Vec<f64> {
        (0..self.tasks.len())
            .map(|m| self.mse(m, variant) / self.mse(m, Variant::Finetuned))
            .collect()
    }

    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ids = self.task_ids();

        let mut w = csv_writer(&dir.join("metrics.csv"))?;
        w.write_record(["task_id", "variant", "mse", "success_rate"])?;
        for r in &self.metrics {
            w.write_record([r.task_id.clone(), r.variant.as_str().into(), r.mse.to_string(), r.success_rate.to_string()])?;
        }
        flush(w, dir)?;

        let mut w = csv_writer(&dir.join("routing.csv"))?;
        let mut header = vec!["episode".to_string(), "true_task".into(), "selected_task".into(), "correct".into()];
        header.extend(ids.iter().map(|id| format!("score_{id}")));
        header.extend(ids.iter().map(|id| format!("p_{id}")));
        w.write_record(&header)?;
        for r in &self.routing {
            let mut rec = vec![
                r.episode.to_string(),
                ids[r.true_task].clone(),
                ids[r.decision.selected].clone(),
                u8::from(r.decision.selected == r.true_task).to_string(),
            ];
            rec.extend(r.decision.scores.iter().map(f64::to_string));
            rec.extend(r.decision.probabilities.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        flush(w, dir)?;

        write_mask_stats(&dir.join("mask_stats.csv"), &self.mask_stats, self.config.merge.lambda, &self.lambda_sweep)?;
        write_block_distance(&dir.join("block_distance.csv"), &self.block_distance)?;

        let mut w = csv_writer(&dir.join("progressive.csv"))?;
        w.write_record(["merged_blocks", "reference_task", "mse"])?;
        let reference = &ids[self.config.eval.reference_task];
        for (k, v) in &self.progressive {
            w.write_record([k.to_string(), reference.clone(), v.to_string()])?;
        }
        flush(w, dir)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn flush(mut w: csv::Writer<fs::File>, dir: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(dir, e))
}

/// Long-format mask statistics; `sweep` rows are appended when given.
pub fn write_mask_stats(
    path: &Path,
    stats: &MaskStats,
    lambda: f32,
    sweep: &[LambdaSweepRow],
) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["statistic", "task_id", "component", "lambda", "value"])?;
    let lam = lambda.to_string();
    w.write_record(["selfish_ratio", "*", "*", &lam, &stats.selfish_ratio.to_string()])?;
    for (c, v) in &stats.per_component_active_ratio {
        w.write_record(["active_ratio", "*", c, &lam, &v.to_string()])?;
    }
    for (id, v) in &stats.per_task_active_ratio {
        w.write_record(["active_ratio", id, "*", &lam, &v.to_string()])?;
    }
    for (id, c, v) in &stats.per_task_component_active_ratio {
        w.write_record(["active_ratio", id, c, &lam, &v.to_string()])?;
    }
    for r in sweep {
        let l = r.lambda.to_string();
        w.write_record(["sweep_active_ratio", "*", "*", &l, &r.mean_active_ratio.to_string()])?;
        w.write_record(["sweep_selfish_ratio", "*", "*", &l, &r.selfish_ratio.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_block_distance(path: &Path, distances: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["block", "distance"])?;
    for (i, d) in distances.iter().enumerate() {
        w.write_record([(i + 1).to_string(), d.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

fn with_full(theta_0: &NamedTensorMap, delta: &impl crate::task_vector::Delta) -> Result<NamedTensorMap> {
    apply(theta_0, delta, 1.0)
}

fn episode_obs(cfg: &ToyConfig, task: &ToyTask, episode: usize, label: &str) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, label, (task.index * 1_000_000 + episode) as u64));
    (0..cfg.eval.episode_length).map(|_| task.sample_obs(&mut rng)).collect()
}

fn episode_mse(bb: &Backbone, expert: &PreparedExpert, task: &ToyTask, obs: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for x in obs {
        total += mse(&predict(bb, expert, x)?, &task.target(x));
    }
    Ok(total / obs.len() as f64)
}

/// Score every masked variant on one observation with the harness backbone.
pub(crate) fn route_obs(bundle: &RouterBundle, bcfg: super::BackboneConfig, obs: &[f64]) -> Result<RoutingDecision> {
    route(bundle, |theta, block| {
        let bb = Backbone::from_map(bcfg, theta)?;
        let (h_t, h_a) = pooled(&bb.forward(obs), block);
        Ok(PooledHidden { h_t, h_a })
    })
}

/// Route a single observation through a bundle written by the harness.
pub fn route_observation(bundle: &RouterBundle, obs: &[f64]) -> Result<RoutingDecision> {
    let bcfg = bundle_backbone(bundle)?;
    if obs.len() != bcfg.obs_dim {
        return Err(Error::shape(&[obs.len()], &[bcfg.obs_dim], "observation"));
    }
    route_obs(bundle, bcfg, obs)
}

fn bundle_backbone(bundle: &RouterBundle) -> Result<super::BackboneConfig> {
    let v = bundle
        .config
        .backbone
        .clone()
        .ok_or_else(|| Error::Routing("bundle does not record a backbone architecture".into()))?;
    Ok(serde_json::from_value(v)?)
}

/// Action chunk from the routed components for an observation.
pub fn act(bundle: &RouterBundle, task: usize, obs: &[f64]) -> Result<Vec<f64>> {
    let bcfg = bundle_backbone(bundle)?;
    let bb = Backbone::from_map(bcfg, &bundle.masked_backbone(task)?)?;
    predict(&bb, &bundle.expert(task)?.prepare(), obs)
}

struct Stage;

impl Stage {
    fn run<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        f().map_err(Error::at_stage(name))
    }
}

pub fn run_pipeline(cfg: &ToyConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let tasks = Stage::run("gen_tasks", || cfg.tasks())?;
    let ids: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
    let bcfg = cfg.backbone_config();
    let pre = Stage::run("pretrain", || pretrain_backbone(cfg, &tasks))?;
    let theta_0 = pre.theta_0.clone();
    let finetune = Stage::run("finetune", || {
        par_map(&tasks, |t| finetune_task(cfg, &theta_0, t)).into_iter().collect::<Result<Vec<_>>>()
    })?;
    let task_vectors = Stage::run("extract", || {
        finetune
            .iter()
            .map(|f| extract(&f.theta_m, &theta_0, &f.task_id))
            .collect::<Result<Vec<_>>>()
    })?;
    let recipe = cfg.recipe(ids.clone());
    let merged = Stage::run("merge", || merge(&recipe, &task_vectors))?;
    let masks: Vec<TaskMask> = Stage::run("mask", || {
        task_vectors
            .iter()
            .map(|tv| build_mask(tv, &merged, cfg.merge.lambda))
            .collect()
    })?;
    let experts: Vec<ActionExpert> = finetune.iter().map(|f| f.expert.clone()).collect();
    let (shared, heads) = Stage::run("merge_experts", || merge_experts(&experts, &ids, cfg.head_start_l()))?;
    let mut bundle = Stage::run("subspace", || {
        RouterBundle::new(theta_0.clone(), merged.clone(), masks.clone(), shared, heads, cfg.merge.k_r, cfg.merge.subspace)
    })?;
    bundle.config.backbone = Some(serde_json::to_value(bcfg)?);

    let (metrics, routing) = Stage::run("evaluate", || evaluate(cfg, &tasks, &theta_0, &task_vectors, &experts, &bundle))?;
    let routing_accuracy =
        routing.iter().filter(|r| r.decision.selected == r.true_task).count() as f64 / routing.len() as f64;

    let (stats, sweep) = Stage::run("mask_stats", || {
        let stats = mask_stats(&masks)?;
        let sweep = cfg
            .eval
            .lambda_grid
            .iter()
            .map(|&lambda| {
                let ms = task_vectors
                    .iter()
                    .map(|tv| build_mask(tv, &merged, lambda))
                    .collect::<Result<Vec<_>>>()?;
                let s = mask_stats(&ms)?;
                Ok(LambdaSweepRow {
                    lambda,
                    mean_active_ratio: s.per_task_active_ratio.iter().map(|(_, v)| v).sum::<f64>() / ms.len() as f64,
                    selfish_ratio: s.selfish_ratio,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((stats, sweep))
    })?;

    let (distances, progressive) = Stage::run("diagnostics", || {
        if experts.len() < 2 {
            return Ok((Vec::new(), Vec::new()));
        }
        let distances = block_distance(&experts)?;
        let r = cfg.eval.reference_task;
        let reference_bb = Backbone::from_map(bcfg, &with_full(&theta_0, &task_vectors[r])?)?;
        let episodes: Vec<Vec<Vec<f64>>> = (0..cfg.eval.episodes_per_task)
            .map(|e| episode_obs(cfg, &tasks[r], e, "episode"))
            .collect();
        let ks: Vec<usize> = (0..=cfg.model.num_blocks).collect();
        let progressive = progressive_merge_eval(&experts, r, &ks, |expert| {
            let w = expert.prepare();
            let mut total = 0.0;
            for obs in &episodes {
                total += episode_mse(&reference_bb, &w, &tasks[r], obs)?;
            }
            Ok(total / episodes.len() as f64)
        })?;
        Ok((distances, progressive))
    })?;

    Ok(PipelineReport {
        config: cfg.clone(),
        pretrain_initial_loss: pre.initial_loss,
        pretrain_final_loss: pre.final_loss,
        finetune,
        theta_0,
        task_vectors,
        bundle,
        metrics,
        routing,
        routing_accuracy,
        mask_stats: stats,
        lambda_sweep: sweep,
        block_distance: distances,
        progressive,
        tasks,
    })
}

fn evaluate(
    cfg: &ToyConfig,
    tasks: &[ToyTask],
    theta_0: &NamedTensorMap,
    task_vectors: &[TaskVector],
    experts: &[ActionExpert],
    bundle: &RouterBundle,
) -> Result<(Vec<MetricRow>, Vec<RoutingRow>)> {
    let bcfg = cfg.backbone_config();
    let m = tasks.len();
    let finetuned = (0..m)
        .map(|i| Ok((Backbone::from_map(bcfg, &with_full(theta_0, &task_vectors[i])?)?, experts[i].prepare())))
        .collect::<Result<Vec<_>>>()?;
    let masked = (0..m)
        .map(|i| Ok((Backbone::from_map(bcfg, &bundle.masked_backbone(i)?)?, bundle.expert(i)?.prepare())))
        .collect::<Result<Vec<_>>>()?;
    let naive_bb = Backbone::from_map(bcfg, &with_full(theta_0, &merge_average(task_vectors)?)?)?;
    let naive_expert = ActionExpert::average(experts)?.prepare();

    let jobs: Vec<(usize, usize)> = (0..m)
        .flat_map(|t| (0..cfg.eval.episodes_per_task).map(move |e| (t, e)))
        .collect();
    let results = par_map(&jobs, |&(t, e)| -> Result<(RoutingDecision, [f64; 3])> {
        let task = &tasks[t];
        let obs = episode_obs(cfg, task, e, "episode");
        let decision = route_obs(bundle, bcfg, &obs[0])?;
        let (fb, fe) = &finetuned[t];
        let (mb, me) = &masked[decision.selected];
        Ok((
            decision,
            [
                episode_mse(fb, fe, task, &obs)?,
                episode_mse(mb, me, task, &obs)?,
                episode_mse(&naive_bb, &naive_expert, task, &obs)?,
            ],
        ))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut metrics = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let rows: Vec<&[f64; 3]> = jobs
            .iter()
            .zip(&results)
            .filter(|((jt, _), _)| *jt == t)
            .map(|(_, (_, v))| v)
            .collect();
        for (vi, variant) in Variant::ALL.iter().enumerate() {
            let n = rows.len() as f64;
            metrics.push(MetricRow {
                task_id: task.task_id.clone(),
                variant: *variant,
                mse: rows.iter().map(|r| r[vi]).sum::<f64>() / n,
                success_rate: rows.iter().filter(|r| r[vi] <= cfg.eval.success_threshold).count() as f64 / n,
            });
        }
    }
    let routing = jobs
        .iter()
        .zip(results)
        .enumerate()
        .map(|(i, ((t, _), (decision, _)))| RoutingRow {
            episode: i,
            true_task: *t,
            decision,
        })
        .collect();
    Ok((metrics, routing))
}

/// For each `k`, average blocks `1..=k` (and the query embedding when
/// `k ≥ 1`) across `models`, keep the rest of `models[reference]`, and
/// evaluate.
pub fn progressive_merge_eval(
    models: &[ActionExpert],
    reference: usize,
    ks: &[usize],
    eval: impl Fn(&ActionExpert) -> Result<f64>,
) -> Result<Vec<(usize, f64)>> {
    if models.len() < 2 {
        return Err(Error::Config("progressive merging needs at least two models".into()));
    }
    let base = models
        .get(reference)
        .ok_or_else(|| Error::Config(format!("reference model {reference} out of range")))?;
    if models.iter().any(|m| m.config != base.config) {
        return Err(Error::Config("progressive merging needs identical architectures".into()));
    }
    let l = base.config.num_blocks;
    ks.iter()
        .map(|&k| {
            if k > l {
                return Err(Error::Config(format!("k = {k} exceeds the {l} blocks")));
            }
            let mut model = base.clone();
            if k >= 1 {
                let q: Vec<&Tensor> = models.iter().map(|m| &m.query_embed).collect();
                model.query_embed = mean_tensors(&q);
            }
            for b in 0..k {
                for p in 0..model.blocks[b].tensors.len() {
                    let group: Vec<&Tensor> = models.iter().map(|m| &m.blocks[b].tensors[p]).collect();
                    model.blocks[b].tensors[p] = mean_tensors(&group);
                }
            }
            Ok((k, eval(&model)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Routing accuracy on the unmodified pair per subspace kind.
    pub natural: Vec<(SubspaceKind, f64)>,
    /// Accuracies after the key projections are replaced adversarially.
    pub adversarial_v_accuracy: f64,
    pub adversarial_k_accuracy: f64,
}

/// Build a two-task bundle from the first two tasks of a finished run and
/// compare routing subspaces. For the adversarial case the merged trunk's
/// key projections at the source block are replaced by a rank-`k_r` matrix
/// whose row space is where the first task's masked variant carries more
/// pooled energy than the second's, on average over both tasks'
/// observations; value projections are left untouched.
pub fn adversarial_k_ablation(report: &PipelineReport, episodes_per_task: usize) -> Result<AblationReport> {
    let cfg = &report.config;
    if report.tasks.len() < 2 {
        return Err(Error::Config("subspace ablation needs at least two tasks".into()));
    }
    let bcfg = cfg.backbone_config();
    let pair = &report.tasks[..2];
    let ids: Vec<String> = pair.iter().map(|t| t.task_id.clone()).collect();
    let tvs = &report.task_vectors[..2];
    let merged = merge(&cfg.recipe(ids.clone()), tvs)?;
    let masks = tvs
        .iter()
        .map(|tv| build_mask(tv, &merged, cfg.merge.lambda))
        .collect::<Result<Vec<_>>>()?;
    let experts: Vec<ActionExpert> = report.finetune[..2].iter().map(|f| f.expert.clone()).collect();
    let (shared, heads) = merge_experts(&experts, &ids, cfg.head_start_l())?;
    let k_r = cfg.merge.k_r;
    let bundle = RouterBundle::new(report.theta_0.clone(), merged, masks, shared, heads, k_r, SubspaceKind::V)?;

    let episodes: Vec<(usize, Vec<f64>)> = (0..2)
        .flat_map(|t| (0..episodes_per_task).map(move |e| (t, e)))
        .map(|(t, e)| (t, episode_obs(cfg, &pair[t], e, "ablation")[0].clone()))
        .collect();
    let accuracy = |b: &RouterBundle| -> Result<f64> {
        let hits = par_map(&episodes, |(t, x)| route_obs(b, bcfg, x).map(|d| d.selected == *t))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    };
    let mut natural = Vec::new();
    for kind in [SubspaceKind::V, SubspaceKind::K, SubspaceKind::KAndV] {
        natural.push((kind, accuracy(&bundle.clone().with_subspace(k_r, kind)?)?));
    }

    // Pooled streams of both masked variants on calibration observations.
    let variants = (0..2)
        .map(|m| Backbone::from_map(bcfg, &bundle.masked_backbone(m)?))
        .collect::<Result<Vec<_>>>()?;
    let block = bundle.config.source_block;
    let d = bcfg.d_model;
    let mut gram = [[vec![0.0; d * d], vec![0.0; d * d]], [vec![0.0; d * d], vec![0.0; d * d]]];
    for t in 0..2 {
        for e in 0..episodes_per_task {
            let x = &episode_obs(cfg, &pair[t], e, "ablation-calibration")[0];
            for (m, bb) in variants.iter().enumerate() {
                let (h_t, h_a) = pooled(&bb.forward(x), block);
                for (path, h) in [h_t, h_a].iter().enumerate() {
                    for i in 0..d {
                        for j in 0..d {
                            gram[m][path][i * d + j] += h[i] * h[j];
                        }
                    }
                }
            }
        }
    }
    // Under crossed pairing the task-path keys score the action stream and
    // vice versa.
    let crossed = bundle.config.pairing == crate::router::Pairing::Crossed;
    let mut adversarial = bundle.clone();
    for (key_path, block_path) in [('t', 0usize), ('a', 1usize)] {
        let stream = if crossed { 1 - block_path } else { block_path };
        let diff: Vec<f64> = gram[0][stream].iter().zip(&gram[1][stream]).map(|(a, b)| a - b).collect();
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &diff));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut k = vec![0f32; d * d];
        for (row, &col) in order.iter().take(k_r).enumerate() {
            let sigma = 2.0 - row as f64 / k_r as f64;
            for j in 0..d {
                k[row * d + j] = (sigma * eig.eigenvectors[(j, col)]) as f32;
            }
        }
        let idx = if key_path == 't' { 3 } else { 9 };
        adversarial.shared.blocks[block - 1].tensors[idx] = Tensor::new(vec![d, d], k)?;
    }
    let adv_k = adversarial.clone().with_subspace(k_r, SubspaceKind::K)?;
    let adv_v = adversarial.with_subspace(k_r, SubspaceKind::V)?;
    Ok(AblationReport {
        natural,
        adversarial_v_accuracy: accuracy(&adv_v)?,
        adversarial_k_accuracy: accuracy(&adv_k)?,
    })
}
