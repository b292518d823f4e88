//! Training-free task routing from singular subspaces of the merged expert.
//!
//! Each task's masked backbone variant encodes the observation; the pooled
//! hidden states are projected onto the top right singular vectors of the
//! merged expert's value (or key) projections, and the task whose variant
//! activates that subspace most strongly wins.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, EXTENSION};
use crate::error::{Error, Result};
use crate::expert::{ActionExpert, ExpertBlock, ExpertHead, SharedExpert};
use crate::mask::{apply_mask, TaskMask};
use crate::merge::MergedVector;
use crate::tensor::{NamedTensorMap, Tensor};

pub const DEFAULT_K_R: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceKind {
    #[default]
    V,
    K,
    /// Keys and values stacked row-wise before the decomposition.
    KAndV,
}

impl std::str::FromStr for SubspaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v" => Ok(Self::V),
            "k" => Ok(Self::K),
            "k_and_v" | "kv" => Ok(Self::KAndV),
            _ => Err(Error::Routing(format!("unknown subspace kind `{s}` (expected v, k or k_and_v)"))),
        }
    }
}

/// Which pooled stream each subspace scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// `r_T = ‖P_T h_A‖`, `r_A = ‖P_A h_T‖`.
    #[default]
    Crossed,
    /// `r_T = ‖P_T h_T‖`, `r_A = ‖P_A h_A‖`.
    Matched,
}

/// Thin decomposition `A = U Σ Vᵀ` with singular values in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub rows: usize,
    pub cols: usize,
    /// `rows × k`, row-major, `k = min(rows, cols)`.
    pub u: Vec<f64>,
    pub singular_values: Vec<f64>,
    /// `k × cols`, row-major; row `i` is the i-th right singular vector.
    pub vt: Vec<f64>,
}

impl Svd {
    pub fn rank(&self) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values
            .iter()
            .filter(|&&s| s > top * 1e-6 && s > 0.0)
            .count()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let k = self.singular_values.len();
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[i * self.cols + j] = (0..k)
                    .map(|t| self.u[i * k + t] * self.singular_values[t] * self.vt[t * self.cols + j])
                    .sum();
            }
        }
        out
    }
}

/// Singular value decomposition of a row-major matrix.
pub fn svd(rows: usize, cols: usize, data: &[f64]) -> Result<Svd> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(Error::Svd(format!("bad matrix layout {rows}×{cols} with {} values", data.len())));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Svd("matrix has non-finite entries".into()));
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    let dec = m
        .try_svd(true, true, 1e-14, 10_000)
        .ok_or_else(|| Error::Svd("decomposition did not converge".into()))?;
    let (u, vt) = match (dec.u, dec.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Svd("decomposition returned no singular vectors".into())),
    };
    let k = rows.min(cols);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]).then(a.cmp(&b)));
    let mut out = Svd {
        rows,
        cols,
        u: vec![0.0; rows * k],
        singular_values: order.iter().map(|&i| dec.singular_values[i]).collect(),
        vt: vec![0.0; k * cols],
    };
    for (dst, &src) in order.iter().enumerate() {
        // First nonzero component of each right vector made positive.
        let sign = (0..cols)
            .map(|j| vt[(src, j)])
            .find(|v| v.abs() > 1e-12)
            .map_or(1.0, f64::signum);
        for j in 0..cols {
            out.vt[dst * cols + j] = sign * vt[(src, j)];
        }
        for i in 0..rows {
            out.u[i * k + dst] = sign * u[(i, src)];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterSubspace {
    /// `k_r × d_model`, rows orthonormal.
    pub p_t: Tensor,
    pub p_a: Tensor,
    pub k_r: usize,
    /// 1-based expert block the projections came from.
    pub source_block: usize,
    pub kind: SubspaceKind,
}

fn projection_matrix(block: &ExpertBlock, path: char, kind: SubspaceKind) -> (usize, usize, Vec<f64>) {
    let as_f64 = |t: &Tensor| t.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
    let v = block.projection(path, 'v');
    let k = block.projection(path, 'k');
    let (rows, cols) = (v.shape()[0], v.shape()[1]);
    match kind {
        SubspaceKind::V => (rows, cols, as_f64(v)),
        SubspaceKind::K => (rows, cols, as_f64(k)),
        SubspaceKind::KAndV => {
            let mut data = as_f64(k);
            data.extend(as_f64(v));
            (2 * rows, cols, data)
        }
    }
}

fn top_right_vectors(block: &ExpertBlock, path: char, kind: SubspaceKind, k_r: usize) -> Result<Tensor> {
    let (rows, cols, data) = projection_matrix(block, path, kind);
    let dec = svd(rows, cols, &data)?;
    let rank = dec.rank();
    if k_r > rank {
        return Err(Error::Svd(format!(
            "k_r = {k_r} exceeds numerical rank {rank} of the {path}-path projection"
        )));
    }
    let values = dec.vt[..k_r * cols].iter().map(|&v| v as f32).collect();
    Tensor::from_computed(&[k_r, cols], values, "router subspace")
}

/// Subspace from the projections of 1-based `block_index` in `blocks`.
pub fn extract_subspace(
    blocks: &[ExpertBlock],
    block_index: usize,
    k_r: usize,
    kind: SubspaceKind,
) -> Result<RouterSubspace> {
    if block_index == 0 || block_index > blocks.len() {
        return Err(Error::Routing(format!(
            "source block {block_index} does not exist among {} merged blocks",
            blocks.len()
        )));
    }
    let block = &blocks[block_index - 1];
    let d = block.projection('t', 'v').shape()[1];
    if k_r == 0 || k_r > d {
        return Err(Error::Routing(format!("k_r = {k_r} must be in 1..={d}")));
    }
    Ok(RouterSubspace {
        p_t: top_right_vectors(block, 't', kind, k_r)?,
        p_a: top_right_vectors(block, 'a', kind, k_r)?,
        k_r,
        source_block: block_index,
        kind,
    })
}

/// `‖P h‖₂` for a row-major `k × d` projection.
pub fn projection_norm(p: &Tensor, h: &[f64]) -> Result<f64> {
    let d = p.shape()[1];
    if h.len() != d {
        return Err(Error::shape(&[h.len()], &[d], "pooled hidden state"));
    }
    Ok(p.data()
        .chunks(d)
        .map(|row| {
            let dot: f64 = row.iter().zip(h).map(|(&a, b)| f64::from(a) * b).sum();
            dot * dot
        })
        .sum::<f64>()
        .sqrt())
}

/// `(r_T, r_A)` for one task's pooled streams.
pub fn activation_strength(
    subspace: &RouterSubspace,
    h_t: &[f64],
    h_a: &[f64],
    pairing: Pairing,
) -> Result<(f64, f64)> {
    match pairing {
        Pairing::Crossed => Ok((projection_norm(&subspace.p_t, h_a)?, projection_norm(&subspace.p_a, h_t)?)),
        Pairing::Matched => Ok((projection_norm(&subspace.p_t, h_t)?, projection_norm(&subspace.p_a, h_a)?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingDecision {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub selected: usize,
    pub r_t: Vec<f64>,
    pub r_a: Vec<f64>,
}

/// Combine per-path scores, normalize with softmax and pick the most likely
/// task (lowest index on ties).
pub fn decide(r_t: Vec<f64>, r_a: Vec<f64>) -> Result<RoutingDecision> {
    if r_t.is_empty() || r_t.len() != r_a.len() {
        return Err(Error::Routing(format!(
            "need equal, non-empty score vectors (got {} and {})",
            r_t.len(),
            r_a.len()
        )));
    }
    let scores: Vec<f64> = r_t.iter().zip(&r_a).map(|(a, b)| 0.5 * (a + b)).collect();
    let probabilities = softmax(&scores);
    let selected = argmax(&scores);
    Ok(RoutingDecision {
        scores,
        probabilities,
        selected,
        r_t,
        r_a,
    })
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean-pooled block hidden states produced by a backbone variant.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledHidden {
    pub h_t: Vec<f64>,
    pub h_a: Vec<f64>,
}

/// Persisted routing settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub k_r: usize,
    pub source_block: usize,
    #[serde(default)]
    pub kind: SubspaceKind,
    #[serde(default)]
    pub pairing: Pairing,
    pub task_ids: Vec<String>,
    /// Architecture of the backbone that produced `base.ntm`, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<serde_json::Value>,
}

/// Everything needed to route and then act: base weights, merged update,
/// per-task masks, merged expert trunk, per-task heads and the subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterBundle {
    pub base: NamedTensorMap,
    pub tau_merge: MergedVector,
    pub masks: Vec<TaskMask>,
    pub shared: SharedExpert,
    pub heads: Vec<ExpertHead>,
    pub subspace: RouterSubspace,
    pub config: RouterConfig,
}

impl RouterBundle {
    pub fn new(
        base: NamedTensorMap,
        tau_merge: MergedVector,
        masks: Vec<TaskMask>,
        shared: SharedExpert,
        heads: Vec<ExpertHead>,
        k_r: usize,
        kind: SubspaceKind,
    ) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Routing("bundle has no tasks".into()));
        }
        let task_ids: Vec<String> = masks.iter().map(|m| m.task_id.clone()).collect();
        let head_ids: Vec<String> = heads.iter().map(|h| h.task_id.clone()).collect();
        if task_ids != head_ids {
            return Err(Error::Routing(format!("mask tasks {task_ids:?} differ from head tasks {head_ids:?}")));
        }
        let source_block = shared.head_start_l.saturating_sub(1);
        let subspace = extract_subspace(&shared.blocks, source_block, k_r, kind)?;
        Ok(Self {
            base,
            tau_merge,
            masks,
            shared,
            heads,
            subspace,
            config: RouterConfig {
                k_r,
                source_block,
                kind,
                pairing: Pairing::Crossed,
                task_ids,
                backbone: None,
            },
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.masks.len()
    }

    pub fn task_ids(&self) -> &[String] {
        &self.config.task_ids
    }

    /// Recompute the subspace from the shared trunk.
    pub fn with_subspace(mut self, k_r: usize, kind: SubspaceKind) -> Result<Self> {
        self.subspace = extract_subspace(&self.shared.blocks, self.config.source_block, k_r, kind)?;
        self.config.k_r = k_r;
        self.config.kind = kind;
        Ok(self)
    }

    pub fn with_pairing(mut self, pairing: Pairing) -> Self {
        self.config.pairing = pairing;
        self
    }

    /// `Θ_0 + S_m ⊙ τ_merge`.
    pub fn masked_backbone(&self, task: usize) -> Result<NamedTensorMap> {
        let mask = self
            .masks
            .get(task)
            .ok_or_else(|| Error::Routing(format!("task index {task} out of range")))?;
        apply_mask(&self.base, &self.tau_merge, mask)
    }

    pub fn expert(&self, task: usize) -> Result<ActionExpert> {
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::Routing(format!("task index {task} out of range")))?;
        ActionExpert::assemble(&self.shared, head)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["masks", "heads"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        save_checkpoint(&self.base, dir.join(format!("base.{EXTENSION}")))?;
        save_checkpoint(&self.tau_merge.to_checkpoint(), dir.join(format!("tau_merge.{EXTENSION}")))?;
        save_checkpoint(&self.shared.to_map(), dir.join(format!("shared_expert.{EXTENSION}")))?;
        for (id, (mask, head)) in self.config.task_ids.iter().zip(self.masks.iter().zip(&self.heads)) {
            check_file_stem(id)?;
            save_checkpoint(&mask.to_checkpoint(), dir.join("masks").join(format!("{id}.{EXTENSION}")))?;
            save_checkpoint(&head.to_map(), dir.join("heads").join(format!("{id}.{EXTENSION}")))?;
        }
        let path = dir.join("router.json");
        let json = serde_json::to_string_pretty(&self.config)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("router.json");
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: RouterConfig = serde_json::from_str(&raw)?;
        let base = load_checkpoint(dir.join(format!("base.{EXTENSION}")))?;
        let tau_merge = MergedVector::from_checkpoint(load_checkpoint(dir.join(format!("tau_merge.{EXTENSION}")))?)?;
        let shared = SharedExpert::from_map(&load_checkpoint(dir.join(format!("shared_expert.{EXTENSION}")))?)?;
        let mut masks = Vec::new();
        let mut heads = Vec::new();
        for id in &config.task_ids {
            check_file_stem(id)?;
            masks.push(TaskMask::from_checkpoint(load_checkpoint(
                dir.join("masks").join(format!("{id}.{EXTENSION}")),
            )?)?);
            heads.push(ExpertHead::from_map(&load_checkpoint(
                dir.join("heads").join(format!("{id}.{EXTENSION}")),
            )?)?);
        }
        let mut bundle = Self::new(base, tau_merge, masks, shared, heads, config.k_r, config.kind)?;
        if bundle.config.source_block != config.source_block {
            return Err(Error::Routing(format!(
                "router.json source_block {} disagrees with head_start_l {}",
                config.source_block, bundle.shared.head_start_l
            )));
        }
        bundle.config = config;
        Ok(bundle)
    }
}

fn check_file_stem(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
        return Err(Error::Routing(format!("task id `{id}` is not usable as a file name")));
    }
    Ok(())
}

/// Score every task's masked variant on one observation.
///
/// `encode` receives a masked backbone and the 1-based source block and
/// returns the mean-pooled streams of that block.
pub fn route<F>(bundle: &RouterBundle, encode: F) -> Result<RoutingDecision>
where
    F: Fn(&NamedTensorMap, usize) -> Result<PooledHidden> + Sync,
{
    let per_task = |m: usize| -> Result<(f64, f64)> {
        let theta = bundle.masked_backbone(m)?;
        let id = &bundle.config.task_ids[m];
        let pooled = encode(&theta, bundle.config.source_block).map_err(|e| Error::Encoder {
            task: id.clone(),
            message: e.to_string(),
        })?;
        activation_strength(&bundle.subspace, &pooled.h_t, &pooled.h_a, bundle.config.pairing)
    };
    #[cfg(feature = "parallel")]
    let scored: Vec<Result<(f64, f64)>> = {
        use rayon::prelude::*;
        (0..bundle.num_tasks()).into_par_iter().map(per_task).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let scored: Vec<Result<(f64, f64)>> = (0..bundle.num_tasks()).map(per_task).collect();
    let (r_t, r_a): (Vec<f64>, Vec<f64>) = scored.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    decide(r_t, r_a)
}

/// Components frozen for a whole episode after the single routing step.
#[derive(Debug, Clone)]
pub struct EpisodeSelection {
    pub decision: RoutingDecision,
    pub task_id: String,
    pub backbone: NamedTensorMap,
    pub expert: ActionExpert,
}

pub fn route_episode<F>(bundle: &RouterBundle, encode: F) -> Result<EpisodeSelection>
where
    F: Fn(&NamedTensorMap, usize) -> Result<PooledHidden> + Sync,
{
    let decision = route(bundle, encode)?;
    select(bundle, decision)
}

/// Freeze the components for a given decision.
pub fn select(bundle: &RouterBundle, decision: RoutingDecision) -> Result<EpisodeSelection> {
    let m = decision.selected;
    Ok(EpisodeSelection {
        task_id: bundle.config.task_ids[m].clone(),
        backbone: bundle.masked_backbone(m)?,
        expert: bundle.expert(m)?,
        decision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_svd() {
        let s = svd(2, 2, &[3.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 1.0]);
        assert_eq!(&s.vt[..2], &[1.0, 0.0]);
    }

    #[test]
    fn identity_projection_score() {
        let sub = RouterSubspace {
            p_t: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            p_a: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            k_r: 2,
            source_block: 1,
            kind: SubspaceKind::V,
        };
        let (r_t, _) = activation_strength(&sub, &[0.0, 0.0], &[3.0, 4.0], Pairing::Crossed).unwrap();
        assert_eq!(r_t, 5.0);
        let (r_t, r_a) = activation_strength(&sub, &[0.0, 0.0], &[3.0, 4.0], Pairing::Matched).unwrap();
        assert_eq!((r_t, r_a), (0.0, 5.0));
        assert!(activation_strength(&sub, &[0.0], &[3.0, 4.0], Pairing::Crossed).is_err());
    }

    #[test]
    fn orthogonal_input_scores_zero() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(projection_norm(&p, &[0.0, 7.0]).unwrap(), 0.0);
    }

    #[test]
    fn decision_examples() {
        let one = decide(vec![0.3], vec![9.0]).unwrap();
        assert_eq!((one.probabilities.clone(), one.selected), (vec![1.0], 0));
        let tie = decide(vec![1.0; 3], vec![1.0; 3]).unwrap();
        assert_eq!(tie.selected, 0);
        for p in tie.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(decide(vec![], vec![]).is_err());
    }

    #[test]
    fn subspace_kind_parsing() {
        assert_eq!("V".parse::<SubspaceKind>().unwrap(), SubspaceKind::V);
        assert_eq!("k_and_v".parse::<SubspaceKind>().unwrap(), SubspaceKind::KAndV);
        assert!("q".parse::<SubspaceKind>().is_err());
    }

    #[test]
    fn rank_deficient_rejects_large_k() {
        let s = svd(2, 2, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.rank(), 1);
    }
}
