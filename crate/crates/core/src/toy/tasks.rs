//! Synthetic task family: each task lights up its own observation channel
//! group and maps it to an action chunk through a task-specific
//! linear-plus-sinusoid function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskFamilyConfig {
    /// Upper bound on the number of tasks; one channel group each.
    pub channel_groups: usize,
    pub group_dim: usize,
    /// Channels shared by every task.
    pub common_dim: usize,
    /// Scale of the per-task channel-group mean.
    pub mean_scale: f64,
    pub obs_noise: f64,
    /// Noise on channel groups that belong to other tasks.
    pub background_noise: f64,
    /// Amplitude of the sinusoidal part of the target map.
    pub nonlinearity: f64,
    /// Minimum pairwise distance between task goal vectors.
    pub goal_floor: f64,
}

impl Default for TaskFamilyConfig {
    fn default() -> Self {
        Self {
            channel_groups: 4,
            group_dim: 4,
            common_dim: 4,
            mean_scale: 1.5,
            obs_noise: 1.0,
            background_noise: 0.0,
            nonlinearity: 0.5,
            goal_floor: 1.0,
        }
    }
}

impl TaskFamilyConfig {
    pub fn obs_dim(&self) -> usize {
        self.common_dim + self.channel_groups * self.group_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub task_id: String,
    pub index: usize,
    pub family: TaskFamilyConfig,
    pub action_dim: usize,
    pub horizon: usize,
    /// Mean of this task's channel group.
    pub mean: Vec<f64>,
    /// `out × group_dim` with `out = horizon · action_dim`.
    pub linear: Vec<f64>,
    /// Readout of the shared sinusoidal features, `out × group_dim`.
    pub mix: Vec<f64>,
    /// `group_dim × group_dim`, shared by the whole family.
    pub freq: Vec<f64>,
    /// `out × common_dim`.
    pub common: Vec<f64>,
    pub offset: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

impl ToyTask {
    pub fn out_dim(&self) -> usize {
        self.action_dim * self.horizon
    }

    fn generate(index: usize, seed: u64, attempt: u64, family: TaskFamilyConfig, action_dim: usize, horizon: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "task", index as u64 * 1000 + attempt));
        let (g, c, out) = (family.group_dim, family.common_dim, action_dim * horizon);
        let mean = uniform(&mut rng, g, 1.0)
            .into_iter()
            .map(|v| family.mean_scale * (0.5 + 0.5 * v.abs()) * v.signum())
            .collect();
        let lin_scale = 1.0 / (g as f64).sqrt();
        Self {
            task_id: format!("task{index}"),
            index,
            family,
            action_dim,
            horizon,
            mean,
            linear: uniform(&mut rng, out * g, 1.5 * lin_scale),
            mix: uniform(&mut rng, out * g, 1.5 * lin_scale),
            freq: {
                let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "family-freq", 0));
                uniform(&mut frng, g * g, 2.0 * lin_scale)
            },
            common: uniform(&mut rng, out * c.max(1), 0.5 / (c.max(1) as f64).sqrt())[..out * c].to_vec(),
            offset: uniform(&mut rng, out, 1.0),
        }
    }

    /// Concatenated goal parameters used for the separation check.
    pub fn goal_vector(&self) -> Vec<f64> {
        [&self.mean[..], &self.linear, &self.mix, &self.common, &self.offset].concat()
    }

    fn group_range(&self) -> std::ops::Range<usize> {
        let start = self.family.common_dim + self.index * self.family.group_dim;
        start..start + self.family.group_dim
    }

    pub fn sample_obs(&self, rng: &mut impl Rng) -> Vec<f64> {
        let f = &self.family;
        let mut x = vec![0.0; f.obs_dim()];
        for v in x.iter_mut().take(f.common_dim) {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let own = self.group_range();
        for i in f.common_dim..x.len() {
            let z: f64 = rng.sample(StandardNormal);
            x[i] = if own.contains(&i) {
                self.mean[i - own.start] + f.obs_noise * z
            } else {
                f.background_noise * z
            };
        }
        x
    }

    /// Flattened `horizon × action_dim` target chunk.
    pub fn target(&self, obs: &[f64]) -> Vec<f64> {
        let f = &self.family;
        let g = f.group_dim;
        let own = self.group_range();
        let centered: Vec<f64> = obs[own.clone()]
            .iter()
            .zip(&self.mean)
            .map(|(x, m)| (x - m) / f.obs_noise.max(1e-6))
            .collect();
        let features: Vec<f64> = (0..g)
            .map(|i| (0..g).map(|j| self.freq[i * g + j] * centered[j]).sum::<f64>().sin())
            .collect();
        (0..self.out_dim())
            .map(|o| {
                let lin: f64 = (0..g).map(|j| self.linear[o * g + j] * centered[j]).sum();
                let nl: f64 = (0..g).map(|j| self.mix[o * g + j] * features[j]).sum();
                let com: f64 = (0..f.common_dim)
                    .map(|j| self.common[o * f.common_dim + j] * obs[j])
                    .sum();
                self.offset[o] + lin + f.nonlinearity * nl + com
            })
            .collect()
    }
}

/// `M` tasks, each determined by `(seed, index)` alone, so smaller families
/// are prefixes of larger ones.
pub fn gen_tasks(
    m: usize,
    seed: u64,
    family: TaskFamilyConfig,
    action_dim: usize,
    horizon: usize,
) -> Result<Vec<ToyTask>> {
    if m == 0 || m > family.channel_groups {
        return Err(Error::Config(format!(
            "number of tasks must be in 1..={} (one channel group each), got {m}",
            family.channel_groups
        )));
    }
    if family.group_dim == 0 || !(family.obs_noise > 0.0) {
        return Err(Error::Config("group_dim and obs_noise must be positive".into()));
    }
    let mut tasks: Vec<ToyTask> = Vec::with_capacity(m);
    for index in 0..m {
        let mut attempt = 0;
        loop {
            let t = ToyTask::generate(index, seed, attempt, family, action_dim, horizon);
            let gv = t.goal_vector();
            if tasks.iter().all(|o| distance(&o.goal_vector(), &gv) >= family.goal_floor) {
                tasks.push(t);
                break;
            }
            attempt += 1;
            if attempt > 1000 {
                return Err(Error::Config(format!("cannot separate task {index} by goal_floor")));
            }
        }
    }
    Ok(tasks)
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
