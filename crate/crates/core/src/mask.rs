//! Per-task binary masks from the parameter-level consistency test, masked
//! application of `τ_merge`, and the interference statistics derived from them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::merge::MergedVector;
use crate::task_vector::{check_fingerprint, TaskVector, KIND_KEY, TASK_ID_KEY};
use crate::tensor::{NamedTensorMap, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMask {
    /// 0/1-valued tensors, one per task-vector tensor.
    pub masks: NamedTensorMap,
    pub lambda: f32,
    pub task_id: String,
}

impl TaskMask {
    pub fn to_checkpoint(&self) -> NamedTensorMap {
        self.masks
            .without_metadata()
            .with_meta(KIND_KEY, "task_mask")
            .with_meta("lambda", self.lambda.to_string())
            .with_meta(TASK_ID_KEY, &self.task_id)
    }

    pub fn from_checkpoint(map: NamedTensorMap) -> Result<Self> {
        if map.meta(KIND_KEY) != Some("task_mask") {
            return Err(Error::InvalidTensor("checkpoint is not a task mask".into()));
        }
        for (name, t) in map.iter() {
            if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidTensor(format!("mask `{name}` is not 0/1-valued")));
            }
        }
        let lambda = map
            .meta("lambda")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidTensor("task mask lacks lambda".into()))?;
        Ok(Self {
            lambda,
            task_id: map.meta(TASK_ID_KEY).unwrap_or_default().to_string(),
            masks: map.without_metadata(),
        })
    }

    fn active_count(&self, mut keep: impl FnMut(&str) -> bool) -> (usize, usize) {
        self.masks
            .iter()
            .filter(|(n, _)| keep(n))
            .fold((0, 0), |(on, total), (_, t)| {
                (on + t.data().iter().filter(|&&v| v == 1.0).count(), total + t.len())
            })
    }
}

/// `S_m = 𝕀[|τ_m| > λ·|τ_merge − τ_m|]`, strict inequality, evaluated in f32.
pub fn build_mask(tau_m: &TaskVector, tau_merge: &MergedVector, lambda: f32) -> Result<TaskMask> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Recipe(format!("lambda {lambda} must be >= 0")));
    }
    if tau_m.base_fingerprint != tau_merge.base_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: tau_merge.base_fingerprint.clone(),
            found: tau_m.base_fingerprint.clone(),
        });
    }
    let masks = tau_m.delta.try_map(|name, own| {
        let merged = tau_merge.tau_merge.require(name)?;
        if !merged.same_shape(own) {
            return Err(Error::shape(own.shape(), merged.shape(), name));
        }
        let data = own
            .data()
            .iter()
            .zip(merged.data())
            .map(|(&t, &m)| if t.abs() > lambda * (m - t).abs() { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_computed(own.shape(), data, name)
    })?;
    Ok(TaskMask {
        masks,
        lambda,
        task_id: tau_m.task_id.clone(),
    })
}

/// `Θ_0 + S ⊙ τ_merge`: active positions take the merged update, inactive
/// positions keep the pretrained value bit-for-bit.
pub fn apply_mask(
    theta_0: &NamedTensorMap,
    tau_merge: &MergedVector,
    mask: &TaskMask,
) -> Result<NamedTensorMap> {
    check_fingerprint(theta_0, &tau_merge.base_fingerprint)?;
    for (name, tau) in tau_merge.tau_merge.iter() {
        let base = theta_0.require(name)?;
        let s = mask.masks.require(name)?;
        if !base.same_shape(tau) || !s.same_shape(tau) {
            return Err(Error::shape(base.shape(), s.shape(), name));
        }
    }
    let mut out = theta_0.try_map(|name, base| {
        let (Some(tau), Some(s)) = (tau_merge.tau_merge.get(name), mask.masks.get(name)) else {
            return Ok(base.clone());
        };
        let data = base
            .data()
            .iter()
            .zip(tau.data())
            .zip(s.data())
            .map(|((&b, &t), &on)| if on == 1.0 { b + t } else { b })
            .collect();
        Tensor::from_computed(base.shape(), data, name)
    })?;
    for (k, v) in theta_0.metadata() {
        out.set_meta(k.clone(), v.clone());
    }
    Ok(out)
}

fn check_same_layout(masks: &[TaskMask]) -> Result<()> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Config("at least one mask is required".into()))?;
    for m in &masks[1..] {
        if m.masks.len() != first.masks.len() {
            return Err(Error::Config(format!(
                "mask `{}` has {} tensors, `{}` has {}",
                m.task_id,
                m.masks.len(),
                first.task_id,
                first.masks.len()
            )));
        }
        for (name, t) in first.masks.iter() {
            let other = m.masks.require(name)?;
            if !other.same_shape(t) {
                return Err(Error::shape(t.shape(), other.shape(), name));
            }
        }
    }
    Ok(())
}

/// Fraction of positions kept by exactly one task mask.
pub fn selfish_ratio(masks: &[TaskMask]) -> Result<f64> {
    check_same_layout(masks)?;
    let mut selfish = 0usize;
    let mut total = 0usize;
    for (name, t) in masks[0].masks.iter() {
        let tensors: Vec<&Tensor> = masks.iter().map(|m| m.masks.get(name).unwrap()).collect();
        for i in 0..t.len() {
            let kept = tensors.iter().filter(|s| s.data()[i] == 1.0).count();
            selfish += usize::from(kept == 1);
        }
        total += t.len();
    }
    if total == 0 {
        return Err(Error::Config("masks contain no positions".into()));
    }
    Ok(selfish as f64 / total as f64)
}

/// Mean mask value over tensors whose name starts with `prefix` (or all).
pub fn active_ratio(mask: &TaskMask, prefix: Option<&str>) -> Result<f64> {
    let (on, total) = mask.active_count(|n| prefix.is_none_or(|p| n.starts_with(p)));
    if total == 0 {
        return Err(Error::EmptyFilter(prefix.unwrap_or("").to_string()));
    }
    Ok(on as f64 / total as f64)
}

/// Component of a tensor name: everything before the first `.`.
pub fn component_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStats {
    pub selfish_ratio: f64,
    /// Pooled over all tasks, keyed by component name.
    pub per_component_active_ratio: BTreeMap<String, f64>,
    pub per_task_active_ratio: Vec<(String, f64)>,
    /// `(task, component) → ratio`, the per-component breakdown of each task.
    pub per_task_component_active_ratio: Vec<(String, String, f64)>,
    pub num_tasks: usize,
    pub num_positions: usize,
}

pub fn mask_stats(masks: &[TaskMask]) -> Result<MaskStats> {
    let selfish = selfish_ratio(masks)?;
    let mut components: Vec<String> = Vec::new();
    for name in masks[0].masks.names() {
        let c = component_of(name).to_string();
        if !components.contains(&c) {
            components.push(c);
        }
    }
    let mut per_component = BTreeMap::new();
    let mut per_task_component = Vec::new();
    for c in &components {
        let (mut on, mut total) = (0, 0);
        for m in masks {
            let (o, t) = m.active_count(|n| component_of(n) == c);
            per_task_component.push((m.task_id.clone(), c.clone(), o as f64 / t as f64));
            on += o;
            total += t;
        }
        per_component.insert(c.clone(), on as f64 / total as f64);
    }
    let per_task = masks
        .iter()
        .map(|m| Ok((m.task_id.clone(), active_ratio(m, None)?)))
        .collect::<Result<_>>()?;
    Ok(MaskStats {
        selfish_ratio: selfish,
        per_component_active_ratio: per_component,
        per_task_active_ratio: per_task,
        per_task_component_active_ratio: per_task_component,
        num_tasks: masks.len(),
        num_positions: masks[0].masks.numel(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::{MergeMethod, MergeRecipe};
    use crate::task_vector::fingerprint;

    fn vec_map(name: &str, v: &[f32]) -> NamedTensorMap {
        let mut m = NamedTensorMap::new();
        m.insert(name, Tensor::vector(v).unwrap()).unwrap();
        m
    }

    fn tv(v: &[f32]) -> TaskVector {
        TaskVector {
            delta: vec_map("w", v),
            base_fingerprint: "fp".into(),
            task_id: "t".into(),
        }
    }

    fn merged(v: &[f32]) -> MergedVector {
        MergedVector {
            tau_merge: vec_map("w", v),
            recipe: MergeRecipe::new(MergeMethod::TaskArithmetic, vec!["t".into()]),
            source_task_ids: vec!["t".into()],
            base_fingerprint: "fp".into(),
        }
    }

    fn mask(id: &str, v: &[f32]) -> TaskMask {
        TaskMask {
            masks: vec_map("w", v),
            lambda: 0.6,
            task_id: id.into(),
        }
    }

    #[test]
    fn consistency_test_example() {
        let s = build_mask(&tv(&[1.0, 0.1]), &merged(&[1.2, 1.0]), 0.6).unwrap();
        assert_eq!(s.masks.get("w").unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn lambda_zero_keeps_nonzero_entries() {
        let s = build_mask(&tv(&[0.5, 0.0]), &merged(&[3.0, 3.0]), 0.0).unwrap();
        assert_eq!(s.masks.get("w").unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn single_task_keeps_exactly_nonzero() {
        let v = [0.3, 0.0, -2.0];
        let s = build_mask(&tv(&v), &merged(&v), 0.6).unwrap();
        assert_eq!(s.masks.get("w").unwrap().data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn apply_mask_examples() {
        let base = vec_map("w", &[0.0, 0.0]);
        let fp = fingerprint(&base);
        let mut tau = merged(&[1.2, 1.0]);
        tau.base_fingerprint = fp;
        let out = apply_mask(&base, &tau, &mask("t", &[1.0, 0.0])).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[1.2, 0.0]);
        assert!(apply_mask(&base, &tau, &mask("t", &[0.0, 0.0])).unwrap().bitwise_eq(&base));
        assert_eq!(
            apply_mask(&base, &tau, &mask("t", &[1.0, 1.0])).unwrap().get("w").unwrap().data(),
            &[1.2, 1.0]
        );
    }

    #[test]
    fn selfish_examples() {
        let r = selfish_ratio(&[mask("a", &[1.0, 0.0, 1.0]), mask("b", &[0.0, 0.0, 1.0])]).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
        let same = [mask("a", &[1.0, 0.0]), mask("b", &[1.0, 0.0]), mask("c", &[1.0, 0.0])];
        assert_eq!(selfish_ratio(&same).unwrap(), 0.0);
        let disjoint = [mask("a", &[1.0, 0.0]), mask("b", &[0.0, 1.0])];
        assert_eq!(selfish_ratio(&disjoint).unwrap(), 1.0);
    }

    #[test]
    fn active_ratio_examples_and_filters() {
        assert_eq!(active_ratio(&mask("a", &[1.0, 0.0, 1.0, 0.0]), None).unwrap(), 0.5);
        assert_eq!(active_ratio(&mask("a", &[0.0, 0.0]), None).unwrap(), 0.0);
        let mut masks = NamedTensorMap::new();
        masks.insert("vision.w", Tensor::vector(&[1.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        masks.insert("lang.w", Tensor::vector(&[0.0, 1.0]).unwrap()).unwrap();
        let m = TaskMask { masks, lambda: 0.6, task_id: "a".into() };
        assert_eq!(active_ratio(&m, Some("vision.")).unwrap(), 0.75);
        assert_eq!(active_ratio(&m, Some("lang.")).unwrap(), 0.5);
        assert!(matches!(active_ratio(&m, Some("audio.")), Err(Error::EmptyFilter(_))));
    }

    #[test]
    fn stats_break_down_by_component() {
        let mut a = NamedTensorMap::new();
        a.insert("vision.w", Tensor::vector(&[1.0, 0.0]).unwrap()).unwrap();
        a.insert("lang.w", Tensor::vector(&[1.0, 1.0]).unwrap()).unwrap();
        let mut b = NamedTensorMap::new();
        b.insert("vision.w", Tensor::vector(&[0.0, 0.0]).unwrap()).unwrap();
        b.insert("lang.w", Tensor::vector(&[1.0, 0.0]).unwrap()).unwrap();
        let masks = [
            TaskMask { masks: a, lambda: 0.6, task_id: "a".into() },
            TaskMask { masks: b, lambda: 0.6, task_id: "b".into() },
        ];
        let stats = mask_stats(&masks).unwrap();
        assert_eq!(stats.per_component_active_ratio["vision"], 0.25);
        assert_eq!(stats.per_component_active_ratio["lang"], 0.75);
        assert_eq!(stats.selfish_ratio, 0.5);
        assert_eq!(stats.num_positions, 4);
    }

    #[test]
    fn mask_checkpoint_round_trip() {
        let m = mask("pick", &[1.0, 0.0]);
        assert_eq!(TaskMask::from_checkpoint(m.to_checkpoint()).unwrap(), m);
        let mut bad = m.to_checkpoint();
        bad.replace("w", Tensor::vector(&[0.5, 0.0]).unwrap()).unwrap();
        assert!(TaskMask::from_checkpoint(bad).is_err());
    }
}
