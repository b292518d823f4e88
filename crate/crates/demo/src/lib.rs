//! Browser bindings: merge a handful of task vectors, sweep the mask
//! threshold, and turn routing scores into a decision.
//!
//! Task vectors cross the boundary as one flat row-major array holding
//! `num_tasks` rows of equal length.

use mergeforge::mask::{build_mask, selfish_ratio, TaskMask};
use mergeforge::merge::{merge, MergeRecipe, MergedVector};
use mergeforge::router::{argmax, softmax};
use mergeforge::task_vector::TaskVector;
use mergeforge::{Error, NamedTensorMap, Result, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const TENSOR: &str = "tau";

fn task_vectors(data: &[f32], num_tasks: usize) -> Result<Vec<TaskVector>> {
    if num_tasks == 0 || data.is_empty() || data.len() % num_tasks != 0 {
        return Err(Error::Config(format!(
            "{} values do not split into {num_tasks} equal task vectors",
            data.len()
        )));
    }
    data.chunks(data.len() / num_tasks)
        .enumerate()
        .map(|(i, row)| {
            let mut delta = NamedTensorMap::new();
            delta.insert(TENSOR, Tensor::vector(row)?)?;
            Ok(TaskVector { delta, base_fingerprint: "demo".into(), task_id: format!("task{i}") })
        })
        .collect()
}

fn merged(method: &str, vectors: &[TaskVector], alpha: f32, keep: f32) -> Result<MergedVector> {
    let mut recipe = MergeRecipe::new(method.parse()?, vectors.iter().map(|t| t.task_id.clone()).collect());
    recipe.alpha = alpha;
    recipe.ties_keep_fraction = keep;
    merge(&recipe, vectors)
}

/// Merged task vector for `method` (`average`, `task_arithmetic` or `ties`).
pub fn merge_flat(method: &str, data: &[f32], num_tasks: usize, alpha: f32, keep: f32) -> Result<Vec<f32>> {
    let m = merged(method, &task_vectors(data, num_tasks)?, alpha, keep)?;
    Ok(m.tau_merge.require(TENSOR)?.data().to_vec())
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub lambda: f32,
    pub selfish_ratio: f64,
    /// One 0/1 row per task.
    pub masks: Vec<Vec<u8>>,
}

/// Masks of every task against the merged vector at each threshold.
pub fn mask_sweep_rows(method: &str, data: &[f32], num_tasks: usize, lambdas: &[f32]) -> Result<Vec<SweepRow>> {
    let vectors = task_vectors(data, num_tasks)?;
    let m = merged(method, &vectors, 1.0, 0.2)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let masks: Vec<TaskMask> = vectors.iter().map(|t| build_mask(t, &m, lambda)).collect::<Result<_>>()?;
            Ok(SweepRow {
                lambda,
                selfish_ratio: selfish_ratio(&masks)?,
                masks: masks
                    .iter()
                    .map(|k| Ok(k.masks.require(TENSOR)?.data().iter().map(|&v| v as u8).collect()))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Decision {
    pub probabilities: Vec<f64>,
    pub selected: usize,
}

pub fn decide(scores: &[f64]) -> Result<Decision> {
    if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Routing("scores must be finite and non-empty".into()));
    }
    Ok(Decision { probabilities: softmax(scores), selected: argmax(scores) })
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&format!("{}: {e}", e.kind())))
}

fn to_json(value: &impl Serialize) -> std::result::Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = mergeVectors)]
pub fn merge_vectors(method: &str, data: &[f32], num_tasks: usize, alpha: f32, keep: f32) -> std::result::Result<Vec<f32>, JsError> {
    js(merge_flat(method, data, num_tasks, alpha, keep))
}

/// JSON array of `{lambda, selfish_ratio, masks}`.
#[wasm_bindgen(js_name = maskSweep)]
pub fn mask_sweep(method: &str, data: &[f32], num_tasks: usize, lambdas: &[f32]) -> std::result::Result<String, JsError> {
    to_json(&js(mask_sweep_rows(method, data, num_tasks, lambdas))?)
}

/// JSON `{probabilities, selected}`.
#[wasm_bindgen(js_name = routeScores)]
pub fn route_scores(scores: &[f64]) -> std::result::Result<String, JsError> {
    to_json(&js(decide(scores))?)
}
