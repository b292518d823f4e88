//! Data-free merge kernels over task vectors: weight averaging, Task
//! Arithmetic and TIES (trim, elect sign, disjoint mean).
//!
//! Every kernel reduces each parameter position over tasks by first sorting
//! the per-task values, then accumulating in f64. That makes every kernel
//! exactly permutation-invariant in task order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_vector::{Delta, TaskVector, FINGERPRINT_KEY, KIND_KEY};
use crate::tensor::{NamedTensorMap, Tensor};

pub const DEFAULT_ALPHA: f32 = 1.0;
pub const DEFAULT_KEEP_FRACTION: f32 = 0.2;
pub const DEFAULT_LAMBDA: f32 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "task_arithmetic" | "ta" => Ok(Self::TaskArithmetic),
            "ties" => Ok(Self::Ties),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

impl TryFrom<String> for MergeMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MergeMethod> for String {
    fn from(m: MergeMethod) -> String {
        m.to_string()
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::TaskArithmetic => "task_arithmetic",
            Self::Ties => "ties",
        })
    }
}

fn default_alpha() -> f32 {
    DEFAULT_ALPHA
}

fn default_keep() -> f32 {
    DEFAULT_KEEP_FRACTION
}

fn default_lambda() -> f32 {
    DEFAULT_LAMBDA
}

/// Declarative merge description, serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default = "default_keep")]
    pub ties_keep_fraction: f32,
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    /// First expert block kept per task; `None` means the last block.
    #[serde(default)]
    pub head_start_l: Option<usize>,
    #[serde(default)]
    pub task_ids: Vec<String>,
}

impl MergeRecipe {
    pub fn new(method: MergeMethod, task_ids: Vec<String>) -> Self {
        Self {
            method,
            alpha: DEFAULT_ALPHA,
            ties_keep_fraction: DEFAULT_KEEP_FRACTION,
            lambda: DEFAULT_LAMBDA,
            head_start_l: None,
            task_ids,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_ids.is_empty() {
            return Err(Error::Recipe("task_ids must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &self.task_ids {
            if !seen.insert(id) {
                return Err(Error::Recipe(format!("duplicate task id `{id}`")));
            }
        }
        if !(self.ties_keep_fraction > 0.0 && self.ties_keep_fraction <= 1.0) {
            return Err(Error::Recipe(format!(
                "ties_keep_fraction {} not in (0, 1]",
                self.ties_keep_fraction
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Recipe(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Recipe("alpha must be finite".into()));
        }
        if self.head_start_l == Some(0) {
            return Err(Error::Recipe("head_start_l is 1-based".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }
}

/// `τ_merge` together with the recipe that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedVector {
    pub tau_merge: NamedTensorMap,
    pub recipe: MergeRecipe,
    pub source_task_ids: Vec<String>,
    pub base_fingerprint: String,
}

impl Delta for MergedVector {
    fn delta(&self) -> &NamedTensorMap {
        &self.tau_merge
    }

    fn base_fingerprint(&self) -> &str {
        &self.base_fingerprint
    }
}

impl MergedVector {
    pub fn to_checkpoint(&self) -> NamedTensorMap {
        self.tau_merge
            .without_metadata()
            .with_meta(KIND_KEY, "merged_task_vector")
            .with_meta(FINGERPRINT_KEY, &self.base_fingerprint)
            .with_meta("recipe", serde_json::to_string(&self.recipe).expect("recipe"))
            .with_meta("task_ids", self.source_task_ids.join(","))
    }

    pub fn from_checkpoint(map: NamedTensorMap) -> Result<Self> {
        if map.meta(KIND_KEY) != Some("merged_task_vector") {
            return Err(Error::InvalidTensor("checkpoint is not a merged task vector".into()));
        }
        let recipe: MergeRecipe = serde_json::from_str(
            map.meta("recipe")
                .ok_or_else(|| Error::InvalidTensor("merged vector lacks recipe".into()))?,
        )?;
        let base_fingerprint = map.meta(FINGERPRINT_KEY).unwrap_or_default().to_string();
        let source_task_ids = map
            .meta("task_ids")
            .filter(|s| !s.is_empty())
            .map(|s| s.split(',').map(str::to_string).collect())
            .unwrap_or_default();
        Ok(Self {
            tau_merge: map.without_metadata(),
            recipe,
            source_task_ids,
            base_fingerprint,
        })
    }
}

fn check_compatible(vectors: &[TaskVector]) -> Result<()> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Recipe("at least one task vector is required".into()))?;
    for v in &vectors[1..] {
        if v.base_fingerprint != first.base_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: first.base_fingerprint.clone(),
                found: v.base_fingerprint.clone(),
            });
        }
        if v.delta.len() != first.delta.len() {
            return Err(Error::Config(format!(
                "task `{}` has {} tensors, task `{}` has {}",
                v.task_id,
                v.delta.len(),
                first.task_id,
                first.delta.len()
            )));
        }
        for (name, t) in first.delta.iter() {
            let other = v.delta.require(name)?;
            if !other.same_shape(t) {
                return Err(Error::shape(t.shape(), other.shape(), name));
            }
        }
    }
    Ok(())
}

/// Sum of values after sorting, so the result does not depend on input order.
fn ordered_sum(values: &mut [f32]) -> f64 {
    values.sort_unstable_by(f32::total_cmp);
    values.iter().map(|&v| f64::from(v)).sum()
}

/// Per-position reduction over tasks, tensor by tensor.
fn reduce(
    vectors: &[TaskVector],
    mut per_tensor: impl FnMut(&str, &[&Tensor]) -> Result<Vec<f32>>,
) -> Result<NamedTensorMap> {
    check_compatible(vectors)?;
    let first = &vectors[0].delta;
    let mut out = NamedTensorMap::new();
    for (name, t) in first.iter() {
        let inputs: Vec<&Tensor> = vectors
            .iter()
            .map(|v| v.delta.require(name))
            .collect::<Result<_>>()?;
        let data = per_tensor(name, &inputs)?;
        out.insert(name, Tensor::from_computed(t.shape(), data, name)?)?;
    }
    Ok(out)
}

fn pointwise(inputs: &[&Tensor], mut f: impl FnMut(&mut [f32]) -> f64) -> Vec<f32> {
    let n = inputs[0].len();
    let mut column = vec![0f32; inputs.len()];
    (0..n)
        .map(|i| {
            for (c, t) in column.iter_mut().zip(inputs) {
                *c = t.data()[i];
            }
            f(&mut column) as f32
        })
        .collect()
}

fn wrap(vectors: &[TaskVector], method: MergeMethod, tau: NamedTensorMap) -> MergedVector {
    let ids: Vec<String> = vectors.iter().map(|v| v.task_id.clone()).collect();
    MergedVector {
        tau_merge: tau,
        recipe: MergeRecipe::new(method, ids.clone()),
        source_task_ids: ids,
        base_fingerprint: vectors[0].base_fingerprint.clone(),
    }
}

/// Elementwise arithmetic mean over tasks.
pub fn merge_average(vectors: &[TaskVector]) -> Result<MergedVector> {
    let m = vectors.len() as f64;
    let tau = reduce(vectors, |_, inputs| Ok(pointwise(inputs, |col| ordered_sum(col) / m)))?;
    Ok(wrap(vectors, MergeMethod::Average, tau))
}

/// Task Arithmetic: unweighted sum of task vectors (α is applied by [`merge`]).
pub fn merge_ta(vectors: &[TaskVector]) -> Result<MergedVector> {
    let tau = reduce(vectors, |_, inputs| Ok(pointwise(inputs, ordered_sum)))?;
    Ok(wrap(vectors, MergeMethod::TaskArithmetic, tau))
}

/// Number of entries kept by the per-tensor trim.
fn keep_count(n: usize, keep_fraction: f32) -> usize {
    let k = (f64::from(keep_fraction) * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Zero every entry whose magnitude is below the k-th largest magnitude;
/// entries tied with the threshold are all kept.
pub(crate) fn trim(values: &[f32], keep_fraction: f32) -> Vec<f32> {
    let k = keep_count(values.len(), keep_fraction);
    let mut mags: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let threshold = mags[k - 1];
    values
        .iter()
        .map(|&v| if v.abs() >= threshold { v } else { 0.0 })
        .collect()
}

/// TIES merging with per-tensor trimming; a zero sign sum elects positive.
pub fn merge_ties(vectors: &[TaskVector], keep_fraction: f32) -> Result<MergedVector> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Recipe(format!(
            "ties keep fraction {keep_fraction} not in (0, 1]"
        )));
    }
    let tau = reduce(vectors, |_, inputs| {
        let trimmed: Vec<Vec<f32>> = inputs.iter().map(|t| trim(t.data(), keep_fraction)).collect();
        let n = inputs[0].len();
        let mut column = Vec::with_capacity(inputs.len());
        Ok((0..n)
            .map(|i| {
                column.clear();
                column.extend(trimmed.iter().map(|t| t[i]));
                let positive = ordered_sum(&mut column) >= 0.0;
                column.retain(|&v| v != 0.0 && (v > 0.0) == positive);
                if column.is_empty() {
                    0.0
                } else {
                    (ordered_sum(&mut column) / column.len() as f64) as f32
                }
            })
            .collect())
    })?;
    let mut merged = wrap(vectors, MergeMethod::Ties, tau);
    merged.recipe.ties_keep_fraction = keep_fraction;
    Ok(merged)
}

/// `τ_merge = α · R({τ_m})` with the kernel chosen by the recipe.
pub fn merge(recipe: &MergeRecipe, vectors: &[TaskVector]) -> Result<MergedVector> {
    recipe.validate()?;
    let raw = match recipe.method {
        MergeMethod::Average => merge_average(vectors)?,
        MergeMethod::TaskArithmetic => merge_ta(vectors)?,
        MergeMethod::Ties => merge_ties(vectors, recipe.ties_keep_fraction)?,
    };
    let tau = if recipe.alpha == 1.0 {
        raw.tau_merge
    } else {
        raw.tau_merge.try_map(|_, t| t.scale(recipe.alpha))?
    };
    Ok(MergedVector {
        tau_merge: tau,
        recipe: recipe.clone(),
        source_task_ids: raw.source_task_ids,
        base_fingerprint: raw.base_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(id: &str, v: &[f32]) -> TaskVector {
        let mut m = NamedTensorMap::new();
        m.insert("w", Tensor::vector(v).unwrap()).unwrap();
        TaskVector {
            delta: m,
            base_fingerprint: "base".into(),
            task_id: id.into(),
        }
    }

    fn w(m: &MergedVector) -> &[f32] {
        m.tau_merge.get("w").unwrap().data()
    }

    #[test]
    fn average_examples() {
        assert_eq!(w(&merge_average(&[tv("a", &[1.0, 0.0])]).unwrap()), &[1.0, 0.0]);
        let ab = merge_average(&[tv("a", &[1.0, 0.0]), tv("b", &[0.0, 1.0])]).unwrap();
        let ba = merge_average(&[tv("b", &[0.0, 1.0]), tv("a", &[1.0, 0.0])]).unwrap();
        assert_eq!(w(&ab), &[0.5, 0.5]);
        assert_eq!(w(&ab), w(&ba));
    }

    #[test]
    fn ta_examples() {
        assert_eq!(
            w(&merge_ta(&[tv("a", &[1.0, 0.0]), tv("b", &[0.0, 1.0])]).unwrap()),
            &[1.0, 1.0]
        );
        assert_eq!(
            w(&merge_ta(&[tv("a", &[0.3, -2.0]), tv("b", &[-0.3, 2.0])]).unwrap()),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn ties_single_vector_trims_to_top_half() {
        let r = merge_ties(&[tv("a", &[1.0, -0.2, 0.0, 0.4])], 0.5).unwrap();
        assert_eq!(w(&r), &[1.0, 0.0, 0.0, 0.4]);
    }

    #[test]
    fn ties_elect_and_disjoint_mean() {
        let r = merge_ties(&[tv("a", &[2.0, 0.0]), tv("b", &[-1.0, 0.0])], 1.0).unwrap();
        assert_eq!(w(&r), &[2.0, 0.0]);
    }

    #[test]
    fn ties_zero_sign_sum_elects_positive() {
        let r = merge_ties(&[tv("a", &[1.5]), tv("b", &[-1.5])], 1.0).unwrap();
        assert_eq!(w(&r), &[1.5]);
    }

    #[test]
    fn ties_threshold_ties_all_kept() {
        assert_eq!(trim(&[0.5, -0.5, 0.5, 0.1], 0.25), vec![0.5, -0.5, 0.5, 0.0]);
    }

    #[test]
    fn ties_consensus() {
        let v = [0.7, -0.1, 0.3];
        let r = merge_ties(&[tv("a", &v), tv("b", &v), tv("c", &v)], 1.0).unwrap();
        assert_eq!(w(&r), &v);
    }

    #[test]
    fn dispatcher_scales_by_alpha() {
        let mut recipe = MergeRecipe::new(MergeMethod::TaskArithmetic, vec!["a".into(), "b".into()]);
        recipe.alpha = 0.5;
        let r = merge(&recipe, &[tv("a", &[2.0, 0.0]), tv("b", &[0.0, 2.0])]).unwrap();
        assert_eq!(w(&r), &[1.0, 1.0]);
        let single = MergeRecipe::new(MergeMethod::Average, vec!["a".into()]);
        assert_eq!(w(&merge(&single, &[tv("a", &[0.25, -3.0])]).unwrap()), &[0.25, -3.0]);
    }

    #[test]
    fn unknown_method_is_enumerated_error() {
        let err = MergeRecipe::from_json(r#"{"method":"dare","task_ids":["a"]}"#).unwrap_err();
        assert!(err.to_string().contains("dare"), "{err}");
    }

    #[test]
    fn recipe_validation() {
        let mut r = MergeRecipe::new(MergeMethod::Ties, vec!["a".into(), "a".into()]);
        assert!(r.validate().is_err());
        r.task_ids = vec![];
        assert!(r.validate().is_err());
        r.task_ids = vec!["a".into()];
        r.ties_keep_fraction = 0.0;
        assert!(r.validate().is_err());
        r.ties_keep_fraction = 1.0;
        r.validate().unwrap();
    }

    #[test]
    fn mixed_lineage_refused() {
        let mut b = tv("b", &[1.0]);
        b.base_fingerprint = "other".into();
        assert!(matches!(
            merge_ta(&[tv("a", &[1.0]), b]),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(merge_ta(&[]).is_err());
    }

    #[test]
    fn recipe_json_round_trip() {
        let r = MergeRecipe::new(MergeMethod::Ties, vec!["a".into()]);
        assert_eq!(MergeRecipe::from_json(&r.to_json()).unwrap(), r);
        let parsed = MergeRecipe::from_json(r#"{"method":"ties","task_ids":["x"]}"#).unwrap();
        assert_eq!(parsed.ties_keep_fraction, DEFAULT_KEEP_FRACTION);
        assert_eq!(parsed.lambda, DEFAULT_LAMBDA);
    }
}
