//! Synthetic multi-task regression families.
//!
//! Every sample has a latent vector `z` (the task-relevant state) and a
//! background vector drawn from the task's nuisance pool:
//!
//! ```text
//! observation = concat(z, background) + base + σ·noise
//! target      = latent_map · z + σ·noise
//! ```
//!
//! `z = μ_task + N(0, I)`. The base vector is shared by every family (ones on
//! the background coordinates) and gives centroids a common component.
//! `pairs_per_task` sets how many distinct backgrounds a task has (data
//! diversity); `background_spread` scales both a per-task background offset
//! and the per-pair variation (data disparity). With the shortcut flag, the
//! first background coordinate is replaced by a task-identifying constant
//! that tracks the task's mean target.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Knobs for [`gen_family`]. Serializes as the JSON family spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilySpec {
    pub num_tasks: usize,
    pub pairs_per_task: usize,
    pub background_spread: f32,
    pub seed: u64,
    pub latent_dim: usize,
    pub background_dim: usize,
    pub action_dim: usize,
    pub noise_sigma: f32,
    /// Scale of the per-task latent mean.
    pub task_offset_scale: f32,
    pub shortcut: bool,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            num_tasks: 4,
            pairs_per_task: 100,
            background_spread: 1.0,
            seed: 0,
            latent_dim: 8,
            background_dim: 8,
            action_dim: 4,
            noise_sigma: 0.05,
            task_offset_scale: 0.5,
            shortcut: false,
        }
    }
}

impl FamilySpec {
    pub fn new(num_tasks: usize, pairs_per_task: usize, background_spread: f32, seed: u64) -> Self {
        Self {
            num_tasks,
            pairs_per_task,
            background_spread,
            seed,
            ..Self::default()
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.latent_dim + self.background_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_tasks == 0 {
            return bad("num_tasks must be >= 1");
        }
        if self.pairs_per_task == 0 {
            return bad("pairs_per_task must be >= 1");
        }
        if !(self.background_spread >= 0.0 && self.background_spread.is_finite()) {
            return bad("background_spread must be finite and >= 0");
        }
        if self.latent_dim == 0 || self.background_dim == 0 || self.action_dim == 0 {
            return bad("dimensions must be >= 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        if !(self.task_offset_scale >= 0.0 && self.task_offset_scale.is_finite()) {
            return bad("task_offset_scale must be finite and >= 0");
        }
        Ok(())
    }
}

/// One task: a fixed latent→action map, a latent mean, and its backgrounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// `[action_dim × latent_dim]`.
    pub latent_map: Tensor,
    pub latent_mean: Vec<f32>,
    /// `[pairs × background_dim]`.
    pub nuisance_pool: Tensor,
    pub noise_sigma: f32,
    pub shortcut_value: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    pub spec: FamilySpec,
    pub tasks: Vec<TaskSpec>,
}

/// A drawn batch. `latent` is for auxiliary objectives and probes only.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub observations: Tensor,
    pub targets: Tensor,
    pub latent: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.observations.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let obs: Vec<Tensor> = parts.iter().map(|b| b.observations.clone()).collect();
        let tgt: Vec<Tensor> = parts.iter().map(|b| b.targets.clone()).collect();
        let lat: Vec<Tensor> = parts.iter().map(|b| b.latent.clone()).collect();
        Ok(Batch {
            observations: Tensor::vstack(&obs)?,
            targets: Tensor::vstack(&tgt)?,
            latent: Tensor::vstack(&lat)?,
        })
    }
}

/// splitmix64 finalizer; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| normal(rng) * scale).collect()
}

pub fn gen_family(spec: &FamilySpec) -> Result<TaskFamily> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (l, b, a) = (spec.latent_dim, spec.background_dim, spec.action_dim);
    let map_scale = 1.0 / (l as f32).sqrt();
    let latent_map = Tensor::new(vec![a, l], normals(&mut rng, a * l, map_scale))?;

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for _ in 0..spec.num_tasks {
        let latent_mean = normals(&mut rng, l, spec.task_offset_scale);
        let offset = normals(&mut rng, b, 1.0);
        let mut pool = Vec::with_capacity(spec.pairs_per_task * b);
        for _ in 0..spec.pairs_per_task {
            for &o in &offset {
                pool.push(spec.background_spread * (o + normal(&mut rng)));
            }
        }
        let shortcut_value = spec.shortcut.then(|| {
            let row0: f32 = latent_map.data()[..l]
                .iter()
                .zip(&latent_mean)
                .map(|(m, z)| m * z)
                .sum();
            3.0 * row0
        });
        tasks.push(TaskSpec {
            latent_map: latent_map.clone(),
            latent_mean,
            nuisance_pool: Tensor::new(vec![spec.pairs_per_task, b], pool)?,
            noise_sigma: spec.noise_sigma,
            shortcut_value,
        });
    }
    Ok(TaskFamily {
        spec: spec.clone(),
        tasks,
    })
}

impl TaskFamily {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    /// The observation offset every family shares.
    pub fn base(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.spec.latent_dim];
        v.extend(std::iter::repeat_n(1.0, self.spec.background_dim));
        v
    }

    /// Expected observation of a task.
    pub fn centroid(&self, task: usize) -> Result<Vec<f32>> {
        let t = self.tasks.get(task).ok_or(Error::IndexOutOfRange {
            index: task,
            len: self.tasks.len(),
        })?;
        let (pairs, b) = t.nuisance_pool.dims2()?;
        let mut c = self.base();
        let l = self.spec.latent_dim;
        for (ci, mu) in c[..l].iter_mut().zip(&t.latent_mean) {
            *ci += mu;
        }
        for j in 0..b {
            let mean: f64 = (0..pairs)
                .map(|p| t.nuisance_pool.data()[p * b + j] as f64)
                .sum::<f64>()
                / pairs as f64;
            c[l + j] += mean as f32;
        }
        if let Some(s) = t.shortcut_value {
            c[l] = s;
        }
        Ok(c)
    }

    /// Fingerprint of the generated pools and maps.
    pub fn digest(&self) -> Result<String> {
        Ok(self.to_params()?.digest())
    }

    /// All generated tensors as a parameter set, e.g. for a binary cache.
    pub fn to_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            p.insert(format!("task{i:04}.latent_map"), t.latent_map.clone())?;
            p.insert(
                format!("task{i:04}.latent_mean"),
                Tensor::vector(t.latent_mean.clone())?,
            )?;
            p.insert(format!("task{i:04}.nuisance_pool"), t.nuisance_pool.clone())?;
        }
        p.set_meta("kind", "task_family");
        p.set_meta("spec", serde_json::to_string(&self.spec)?);
        Ok(p)
    }

    /// Draws `batch` samples from one task.
    pub fn sample_batch(&self, task_index: usize, batch: usize, seed: u64) -> Result<Batch> {
        let t = self.tasks.get(task_index).ok_or(Error::IndexOutOfRange {
            index: task_index,
            len: self.tasks.len(),
        })?;
        if batch == 0 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        let (l, b, a) = (
            self.spec.latent_dim,
            self.spec.background_dim,
            self.spec.action_dim,
        );
        let d = l + b;
        let base = self.base();
        let sigma = t.noise_sigma;
        let (pairs, _) = t.nuisance_pool.dims2()?;
        let pool = t.nuisance_pool.data();
        let map = t.latent_map.data();

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, task_index as u64 + 1));
        let mut obs = Vec::with_capacity(batch * d);
        let mut tgt = Vec::with_capacity(batch * a);
        let mut lat = Vec::with_capacity(batch * l);
        for _ in 0..batch {
            let z: Vec<f32> = t.latent_mean.iter().map(|m| m + normal(&mut rng)).collect();
            let bg_idx = rng.random_range(0..pairs);
            let bg = &pool[bg_idx * b..(bg_idx + 1) * b];
            for (i, &zi) in z.iter().enumerate() {
                obs.push(zi + base[i] + sigma * normal(&mut rng));
            }
            for (j, &bj) in bg.iter().enumerate() {
                obs.push(bj + base[l + j] + sigma * normal(&mut rng));
            }
            if let Some(s) = t.shortcut_value {
                let k = obs.len() - b;
                obs[k] = s;
            }
            for r in 0..a {
                let y: f32 = map[r * l..(r + 1) * l]
                    .iter()
                    .zip(&z)
                    .map(|(m, zi)| m * zi)
                    .sum();
                tgt.push(y + sigma * normal(&mut rng));
            }
            lat.extend_from_slice(&z);
        }
        Ok(Batch {
            observations: Tensor::new(vec![batch, d], obs)?,
            targets: Tensor::new(vec![batch, a], tgt)?,
            latent: Tensor::new(vec![batch, l], lat)?,
        })
    }

    /// A batch split as evenly as possible across tasks, task-major order.
    pub fn sample_mixed(&self, batch: usize, seed: u64) -> Result<Batch> {
        let n = self.num_tasks();
        let mut parts = Vec::with_capacity(n);
        for task in 0..n {
            let count = batch / n + usize::from(task < batch % n);
            if count > 0 {
                parts.push(self.sample_batch(task, count, seed)?);
            }
        }
        Batch::concat(&parts)
    }

    /// One row per sample: task, observation, target, latent.
    pub fn to_csv(&self, per_task: usize, seed: u64) -> Result<String> {
        let (l, d, a) = (self.latent_dim(), self.obs_dim(), self.action_dim());
        let mut s = String::from("task");
        for i in 0..d {
            s.push_str(&format!(",obs{i}"));
        }
        for i in 0..a {
            s.push_str(&format!(",target{i}"));
        }
        for i in 0..l {
            s.push_str(&format!(",latent{i}"));
        }
        s.push('\n');
        for t in 0..self.num_tasks() {
            let b = self.sample_batch(t, per_task, seed)?;
            for r in 0..per_task {
                s.push_str(&t.to_string());
                let rows = [
                    &b.observations.data()[r * d..(r + 1) * d],
                    &b.targets.data()[r * a..(r + 1) * a],
                    &b.latent.data()[r * l..(r + 1) * l],
                ];
                for row in rows {
                    for v in row {
                        s.push_str(&format!(",{v}"));
                    }
                }
                s.push('\n');
            }
        }
        Ok(s)
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Inverse of the mean pairwise cosine similarity between task centroids.
pub fn disparity_score(family: &TaskFamily) -> Result<f64> {
    let n = family.num_tasks();
    if n < 2 {
        return Err(Error::TooFewTasks(n));
    }
    let centroids: Vec<Vec<f32>> = (0..n).map(|t| family.centroid(t)).collect::<Result<_>>()?;
    for (t, c) in centroids.iter().enumerate() {
        if c.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateCentroid(t));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += cosine(&centroids[i], &centroids[j]);
            count += 1;
        }
    }
    let mean = total / count as f64;
    if mean <= 0.0 {
        return Err(Error::NonPositiveSimilarity(mean));
    }
    Ok(1.0 / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DiversityScore {
    /// The operative diversity proxy.
    pub pairs_per_task: usize,
    /// Distinct (task, background) combinations across the family.
    pub distinct_combinations: usize,
}

pub fn diversity_score(family: &TaskFamily) -> DiversityScore {
    let distinct_combinations = family
        .tasks
        .iter()
        .map(|t| {
            let (pairs, b) = t.nuisance_pool.dims2().unwrap_or((0, 1));
            (0..pairs)
                .map(|p| {
                    t.nuisance_pool.data()[p * b..(p + 1) * b]
                        .iter()
                        .map(|v| v.to_bits())
                        .collect::<Vec<u32>>()
                })
                .collect::<BTreeSet<_>>()
                .len()
        })
        .sum();
    DiversityScore {
        pairs_per_task: family.spec.pairs_per_task,
        distinct_combinations,
    }
}
