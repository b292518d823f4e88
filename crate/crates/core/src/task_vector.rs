//! Task vectors: the per-parameter difference between a finetuned checkpoint
//! and its pretrained base, plus dense materialization of low-rank updates.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensorMap, Tensor};

pub const KIND_KEY: &str = "kind";
pub const FINGERPRINT_KEY: &str = "base_fingerprint";
pub const TASK_ID_KEY: &str = "task_id";

/// Hex SHA-256 over names, shapes and value bits of a map (metadata excluded).
pub fn fingerprint(map: &NamedTensorMap) -> String {
    let mut h = Sha256::new();
    for (name, t) in map.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Anything that can be added onto a base checkpoint.
pub trait Delta {
    fn delta(&self) -> &NamedTensorMap;
    fn base_fingerprint(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub delta: NamedTensorMap,
    pub base_fingerprint: String,
    pub task_id: String,
}

impl Delta for TaskVector {
    fn delta(&self) -> &NamedTensorMap {
        &self.delta
    }

    fn base_fingerprint(&self) -> &str {
        &self.base_fingerprint
    }
}

impl TaskVector {
    pub fn to_checkpoint(&self) -> NamedTensorMap {
        self.delta
            .without_metadata()
            .with_meta(KIND_KEY, "task_vector")
            .with_meta(FINGERPRINT_KEY, &self.base_fingerprint)
            .with_meta(TASK_ID_KEY, &self.task_id)
    }

    pub fn from_checkpoint(map: NamedTensorMap) -> Result<Self> {
        if map.meta(KIND_KEY) != Some("task_vector") {
            return Err(Error::InvalidTensor(
                "checkpoint is not a task vector (kind != task_vector)".into(),
            ));
        }
        let base_fingerprint = map
            .meta(FINGERPRINT_KEY)
            .ok_or_else(|| Error::InvalidTensor("task vector lacks base_fingerprint".into()))?
            .to_string();
        let task_id = map.meta(TASK_ID_KEY).unwrap_or_default().to_string();
        Ok(Self {
            delta: map.without_metadata(),
            base_fingerprint,
            task_id,
        })
    }

    /// Rescale every entry; used by property tests and TA linearity checks.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Ok(Self {
            delta: self.delta.try_map(|_, t| t.scale(factor))?,
            ..self.clone()
        })
    }
}

/// `τ = Θ_m − Θ_0` over the tensors present in both maps. Tensors only in
/// `theta_0` are frozen and omitted; tensors only in `theta_m` are an error.
pub fn extract(theta_m: &NamedTensorMap, theta_0: &NamedTensorMap, task_id: &str) -> Result<TaskVector> {
    let mut delta = NamedTensorMap::new();
    for (name, finetuned) in theta_m.iter() {
        let base = theta_0.require(name)?;
        if !base.same_shape(finetuned) {
            return Err(Error::shape(finetuned.shape(), base.shape(), name));
        }
        delta.insert(name, finetuned.sub(base)?)?;
    }
    Ok(TaskVector {
        delta,
        base_fingerprint: fingerprint(theta_0),
        task_id: task_id.to_string(),
    })
}

/// `Θ_0 + α·δ`; tensors absent from the delta pass through unchanged.
pub fn apply(theta_0: &NamedTensorMap, delta: &impl Delta, alpha: f32) -> Result<NamedTensorMap> {
    check_fingerprint(theta_0, delta.base_fingerprint())?;
    add_scaled(theta_0, delta.delta(), alpha)
}

pub(crate) fn check_fingerprint(theta_0: &NamedTensorMap, expected: &str) -> Result<()> {
    let found = fingerprint(theta_0);
    if found != expected {
        return Err(Error::FingerprintMismatch {
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

pub(crate) fn add_scaled(
    theta_0: &NamedTensorMap,
    delta: &NamedTensorMap,
    alpha: f32,
) -> Result<NamedTensorMap> {
    for (name, d) in delta.iter() {
        let base = theta_0.require(name)?;
        if !base.same_shape(d) {
            return Err(Error::shape(base.shape(), d.shape(), name));
        }
    }
    let mut out = theta_0.try_map(|name, base| match delta.get(name) {
        Some(d) => base.add(&d.scale(alpha)?),
        None => Ok(base.clone()),
    })?;
    for (k, v) in theta_0.metadata() {
        out.set_meta(k.clone(), v.clone());
    }
    Ok(out)
}

/// A LoRA-style factored update `scaling · up × down` targeting one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankUpdate {
    /// `r × d_in`
    pub down: Tensor,
    /// `d_out × r`
    pub up: Tensor,
    pub scaling: f32,
    pub target_name: String,
}

impl LowRankUpdate {
    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }
}

/// Dense `d_out × d_in` form of a low-rank update, accumulated in f64.
pub fn materialize(lr: &LowRankUpdate) -> Result<Tensor> {
    let (ds, us) = (lr.down.shape(), lr.up.shape());
    if ds.len() != 2 || us.len() != 2 || us[1] != ds[0] {
        return Err(Error::shape(us, ds, format!("low-rank factors of `{}`", lr.target_name)));
    }
    let (d_out, r, d_in) = (us[0], ds[0], ds[1]);
    if r > d_in.min(d_out) {
        return Err(Error::InvalidTensor(format!(
            "rank {r} exceeds min({d_out}, {d_in}) for `{}`",
            lr.target_name
        )));
    }
    let (up, down) = (lr.up.data(), lr.down.data());
    let s = f64::from(lr.scaling);
    let mut out = vec![0f32; d_out * d_in];
    for i in 0..d_out {
        for j in 0..d_in {
            let acc: f64 = (0..r)
                .map(|k| f64::from(up[i * r + k]) * f64::from(down[k * d_in + j]))
                .sum();
            out[i * d_in + j] = (s * acc) as f32;
        }
    }
    Tensor::from_computed(&[d_out, d_in], out, &lr.target_name)
}
