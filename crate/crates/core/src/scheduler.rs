//! Hierarchical task scheduling: a linear size curriculum combined with
//! hardness-weighted sampling over distributions.
//!
//! Hardness is the mean relative gap of the current model's greedy rollouts
//! against a frozen oracle pool; weights are a temperature softmax of the
//! gaps, refreshed periodically, uniform until the first refresh.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{io as inst_io, make_instance, DistributionSpec, Problem, TaskSpec, VrpInstance};
use crate::policy::{Policy, PolicyParams};
use crate::rng::{stream, Stream, StreamTag};
use crate::solvers::{relative_gap, solve_reference, subsample_indices, SolverResult};

/// One validation instance with its frozen reference cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolEntry {
    pub instance: VrpInstance,
    pub oracle_cost: f64,
    pub solver_tag: String,
}

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub eta: f64,
    /// Curriculum duration E_s: iterations until the max size is reached.
    pub curriculum_iters: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Size buckets step; the pool is built at {n_min, n_min+step, ..}.
    pub size_step: usize,
    pub dists: Vec<DistributionSpec>,
    pub problem: Problem,
    /// Validation instances per (size bucket, distribution).
    pub pool_per_task: usize,
    /// Instances probed per hardness refresh.
    pub probe_size: usize,
    pub refresh_period: usize,
    /// Improvement-pass budget for the internal reference solver.
    pub solver_budget: usize,
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::invalid_argument("eta must be > 0"));
        }
        if self.n_min < 2 || self.n_min > self.n_max {
            return Err(Error::invalid_argument("bad size range"));
        }
        if self.dists.is_empty() {
            return Err(Error::invalid_argument("no distributions"));
        }
        if self.size_step == 0 || self.pool_per_task == 0 || self.probe_size == 0 {
            return Err(Error::invalid_argument("pool sizes must be positive"));
        }
        for d in &self.dists {
            d.validate()?;
        }
        Ok(())
    }

    pub fn bucket_sizes(&self) -> Vec<usize> {
        let mut v = Vec::new();
        let mut n = self.n_min;
        loop {
            v.push(n);
            if n + self.size_step > self.n_max {
                break;
            }
            n += self.size_step;
        }
        v
    }
}

#[derive(Debug)]
pub struct SchedulerState {
    pub cfg: SchedulerConfig,
    /// Softmax weights over distributions; uniform until the first refresh.
    pub weights: Vec<f64>,
    /// Latest measured gaps per distribution (g_i >= -1).
    pub gaps: Vec<f64>,
    /// val_pool[(bucket index, dist index)] -> frozen entries.
    pub pool: Vec<Vec<Vec<PoolEntry>>>,
    pub refreshes_done: usize,
}

/// Curriculum size at iteration `e`:
/// `floor(n_min + min(e/E_s, 1) * (n_max - n_min))`.
pub fn size_at_iter(e: usize, n_min: usize, n_max: usize, curriculum_iters: usize) -> usize {
    let frac = if curriculum_iters == 0 {
        1.0
    } else {
        (e as f64 / curriculum_iters as f64).min(1.0)
    };
    (n_min as f64 + frac * (n_max - n_min) as f64).floor() as usize
}

/// Softmax of `gaps / eta` with max-subtraction.
pub fn task_weights(gaps: &[f64], eta: f64) -> Vec<f64> {
    assert!(eta > 0.0, "temperature must be positive");
    let mx = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = gaps.iter().map(|g| ((g - mx) / eta).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

impl SchedulerState {
    /// Builds the frozen validation pool and solves every entry once.
    pub fn build(cfg: SchedulerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let buckets = cfg.bucket_sizes();
        let mut pool = Vec::with_capacity(buckets.len());
        for (bi, &n) in buckets.iter().enumerate() {
            let mut per_dist = Vec::with_capacity(cfg.dists.len());
            for (di, dist) in cfg.dists.iter().enumerate() {
                let task = TaskSpec::new(cfg.problem, n, *dist);
                let specs: Vec<(u64, VrpInstance)> = (0..cfg.pool_per_task)
                    .map(|j| {
                        let inst_seed = pool_seed(seed, bi, di, j);
                        let mut rng = stream(inst_seed, StreamTag::ValPool, 0);
                        Ok((inst_seed, make_instance(&task, inst_seed, &mut rng)?))
                    })
                    .collect::<Result<_>>()?;
                let entries: Vec<PoolEntry> = specs
                    .into_par_iter()
                    .map(|(inst_seed, instance)| {
                        let mut srng = stream(inst_seed, StreamTag::Solver, 0);
                        let res: SolverResult =
                            solve_reference(&instance, cfg.solver_budget, &mut srng)?;
                        Ok(PoolEntry {
                            instance,
                            oracle_cost: res.solution.cost,
                            solver_tag: res.solver_tag,
                        })
                    })
                    .collect::<Result<_>>()?;
                per_dist.push(entries);
            }
            pool.push(per_dist);
        }
        let uniform = vec![1.0 / cfg.dists.len() as f64; cfg.dists.len()];
        Ok(SchedulerState { cfg, weights: uniform, gaps: Vec::new(), pool, refreshes_done: 0 })
    }

    pub fn size_at(&self, e: usize) -> usize {
        size_at_iter(e, self.cfg.n_min, self.cfg.n_max, self.cfg.curriculum_iters)
    }

    /// Largest bucket size <= the curriculum size at `e`.
    fn bucket_for(&self, e: usize) -> usize {
        let target = self.size_at(e);
        let buckets = self.cfg.bucket_sizes();
        buckets
            .iter()
            .enumerate()
            .filter(|(_, &n)| n <= target)
            .map(|(i, _)| i)
            .last()
            .unwrap_or(0)
    }

    /// Measures per-distribution gaps with greedy rollouts (no
    /// augmentation) against the frozen oracle costs, then recomputes the
    /// softmax weights. Oracle costs are never recomputed.
    pub fn refresh_hardness(
        &mut self,
        policy: &Policy,
        params: &PolicyParams,
        e: usize,
        seed: u64,
    ) -> Result<&[f64]> {
        let bi = self.bucket_for(e);
        let mut gaps = Vec::with_capacity(self.cfg.dists.len());
        for di in 0..self.cfg.dists.len() {
            let entries = &self.pool[bi][di];
            if entries.is_empty() {
                return Err(Error::invalid_state(format!(
                    "empty validation pool for bucket {} dist {}",
                    bi, di
                )));
            }
            let mut rng = stream(seed, StreamTag::ProbeSubsample, di as u64);
            let picks = subsample_indices(entries.len(), self.cfg.probe_size, &mut rng);
            let (model_costs, oracle_costs): (Vec<f64>, Vec<f64>) = picks
                .par_iter()
                .map(|&idx| {
                    let entry = &entries[idx];
                    let c = policy.greedy_cost(&entry.instance, params)?;
                    Ok((c, entry.oracle_cost))
                })
                .collect::<Result<Vec<(f64, f64)>>>()?
                .into_iter()
                .unzip();
            gaps.push(relative_gap(&model_costs, &oracle_costs)?);
        }
        self.weights = task_weights(&gaps, self.cfg.eta);
        self.gaps = gaps;
        self.refreshes_done += 1;
        Ok(&self.gaps)
    }

    /// Draws `b` tasks (with replacement) at the curriculum size; returned
    /// weights are renormalized to sum to one.
    pub fn sample_batch(&self, e: usize, b: usize, rng: &mut Stream) -> Result<Vec<(TaskSpec, f64)>> {
        if b == 0 {
            return Err(Error::invalid_argument("batch must contain at least one task"));
        }
        let n = self.size_at(e);
        let mut picks = Vec::with_capacity(b);
        for _ in 0..b {
            let u: f64 = rand::Rng::gen(rng);
            let mut acc = 0.0;
            let mut chosen = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u <= acc {
                    chosen = i;
                    break;
                }
            }
            picks.push(chosen);
        }
        let total: f64 = picks.iter().map(|&i| self.weights[i]).sum();
        Ok(picks
            .into_iter()
            .map(|i| {
                let task = TaskSpec::new(self.cfg.problem, n, self.cfg.dists[i]);
                (task, self.weights[i] / total)
            })
            .collect())
    }

    /// Persists the pool: instances in the native format plus a sidecar
    /// mapping line index to oracle cost and solver tag.
    pub fn save_pool(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut instances = Vec::new();
        let mut sidecar = Vec::new();
        for (bi, per_dist) in self.pool.iter().enumerate() {
            for (di, entries) in per_dist.iter().enumerate() {
                for (j, entry) in entries.iter().enumerate() {
                    sidecar.push(serde_json::json!({
                        "id": instances.len(),
                        "bucket": bi,
                        "dist": di,
                        "index": j,
                        "oracle_cost": entry.oracle_cost,
                        "solver": entry.solver_tag,
                    }));
                    instances.push(entry.instance.clone());
                }
            }
        }
        inst_io::write_instances(&instances, dir.join("pool.jsonl"))?;
        let text: String =
            sidecar.iter().map(|v| format!("{}\n", v)).collect();
        std::fs::write(dir.join("pool.oracle.jsonl"), text)?;
        Ok(())
    }
}

fn pool_seed(root: u64, bucket: usize, dist: usize, index: usize) -> u64 {
    // splitmix-style mixing keeps pool instances distinct per slot
    let mut z = root
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(1 + bucket as u64))
        .wrapping_add(0xbf58476d1ce4e5b9u64.wrapping_mul(1 + dist as u64))
        .wrapping_add(0x94d049bb133111ebu64.wrapping_mul(1 + index as u64));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
