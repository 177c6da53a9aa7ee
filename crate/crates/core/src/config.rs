//! Run configuration: every tunable across modules, a flat dotted
//! key/value file format, presets, and a stable config hash.
//!
//! File format: one `section.key = value` per line, `#` comments. Unknown
//! keys are rejected so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::instances::{DistributionSpec, Problem};
use crate::meta::{FewShotConfig, InnerConfig, InnerOptimizer, OuterConfig, OuterRule};
use crate::policy::{ModelConfig, NormKind};
use crate::scheduler::SchedulerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: Problem,
    pub seed: u64,
    // model
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub norm: NormKind,
    pub feedforward_dim: usize,
    pub logit_clip: f64,
    // inner loop
    pub inner_k: usize,
    pub alpha: f64,
    pub inner_optimizer: InnerOptimizer,
    // outer loop
    pub beta: f64,
    pub tasks_per_batch: usize,
    pub rule: OuterRule,
    pub switch_fraction: f64,
    pub total_iters: usize,
    pub lr_decay_last_fraction: f64,
    pub weight_decay: f64,
    // data / tasks
    pub n_min: usize,
    pub n_max: usize,
    pub size_step: usize,
    pub dists: Vec<DistributionSpec>,
    // scheduler
    pub eta: f64,
    pub curriculum_iters: usize,
    pub pool_per_task: usize,
    pub probe_size: usize,
    pub refresh_every: usize,
    pub solver_budget: usize,
    // training batches + cadences
    pub batch_instances: usize,
    pub batch_instances_large: usize,
    pub batch_size_threshold: usize,
    pub val_every: usize,
    pub diagnostics_every: usize,
    pub checkpoint_every: usize,
    // few-shot
    pub few_shot_steps: usize,
    pub few_shot_lr: f64,
    pub few_shot_optimizer: InnerOptimizer,
    pub few_shot_batch: usize,
    pub few_shot_pool: usize,
    pub few_shot_augment: bool,
    // eval
    pub eval_instances: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    DeskScale,
    PaperScale,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk_scale" => Ok(Preset::DeskScale),
            "paper_scale" => Ok(Preset::PaperScale),
            _ => Err(Error::invalid_argument(format!(
                "unknown preset '{}' (expected desk_scale or paper_scale)",
                s
            ))),
        }
    }
}

impl RunConfig {
    /// Desk-scale defaults: small sizes, 2k iterations, minutes on a CPU.
    pub fn desk_scale() -> Self {
        RunConfig {
            problem: Problem::Tsp,
            seed: 0,
            embed_dim: 64,
            layers: 3,
            heads: 4,
            norm: NormKind::BatchNoTrack,
            feedforward_dim: 256,
            logit_clip: 10.0,
            inner_k: 1,
            alpha: 1e-4,
            inner_optimizer: InnerOptimizer::Adam,
            beta: 1e-4,
            tasks_per_batch: 1,
            rule: OuterRule::Switch,
            switch_fraction: 0.2,
            total_iters: 2000,
            lr_decay_last_fraction: 0.1,
            weight_decay: 1e-6,
            n_min: 10,
            n_max: 20,
            size_step: 5,
            dists: vec![DistributionSpec::Uniform, DistributionSpec::gm(2, 5.0)],
            eta: 1.0,
            curriculum_iters: 1800,
            pool_per_task: 64,
            probe_size: 32,
            refresh_every: 100,
            solver_budget: 50,
            batch_instances: 8,
            batch_instances_large: 8,
            batch_size_threshold: 150,
            val_every: 100,
            diagnostics_every: 0,
            checkpoint_every: 500,
            few_shot_steps: 1,
            few_shot_lr: 1e-4,
            few_shot_optimizer: InnerOptimizer::Adam,
            few_shot_batch: 256,
            few_shot_pool: 256,
            few_shot_augment: false,
            eval_instances: 64,
            workers: 0,
        }
    }

    /// Full-scale defaults matching the published training setups. Not
    /// runnable on a desk machine; provided for completeness.
    pub fn paper_scale() -> Self {
        RunConfig {
            problem: Problem::Tsp,
            seed: 0,
            embed_dim: 64,
            layers: 3,
            heads: 4,
            norm: NormKind::BatchNoTrack,
            feedforward_dim: 256,
            logit_clip: 10.0,
            inner_k: 1,
            alpha: 1e-4,
            inner_optimizer: InnerOptimizer::Adam,
            beta: 1e-4,
            tasks_per_batch: 1,
            rule: OuterRule::Switch,
            switch_fraction: 0.2,
            total_iters: 250_000,
            lr_decay_last_fraction: 0.1,
            weight_decay: 1e-6,
            n_min: 50,
            n_max: 200,
            size_step: 5,
            dists: crate::instances::training_distributions(),
            eta: 1.0,
            curriculum_iters: 225_000,
            pool_per_task: 64,
            probe_size: 32,
            refresh_every: 100,
            solver_budget: 50,
            batch_instances: 64,
            batch_instances_large: 32,
            batch_size_threshold: 150,
            val_every: 500,
            diagnostics_every: 0,
            checkpoint_every: 5000,
            few_shot_steps: 1,
            few_shot_lr: 1e-5,
            few_shot_optimizer: InnerOptimizer::Adam,
            few_shot_batch: 64,
            few_shot_pool: 1000,
            few_shot_augment: true,
            eval_instances: 1000,
            workers: 0,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::DeskScale => Self::desk_scale(),
            Preset::PaperScale => Self::paper_scale(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            problem: self.problem,
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            norm: self.norm,
            feedforward_dim: self.feedforward_dim,
            logit_clip: self.logit_clip,
        }
    }

    pub fn inner_config(&self) -> InnerConfig {
        InnerConfig {
            k: self.inner_k,
            alpha: self.alpha,
            optimizer: self.inner_optimizer,
            differentiable: false,
        }
    }

    pub fn outer_config(&self) -> OuterConfig {
        OuterConfig {
            beta: self.beta,
            tasks_per_batch: self.tasks_per_batch,
            rule: self.rule,
            switch_fraction: self.switch_fraction,
            total_iters: self.total_iters,
            lr_decay_last_fraction: self.lr_decay_last_fraction,
            weight_decay: self.weight_decay,
        }
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            eta: self.eta,
            curriculum_iters: self.curriculum_iters,
            n_min: self.n_min,
            n_max: self.n_max,
            size_step: self.size_step,
            dists: self.dists.clone(),
            problem: self.problem,
            pool_per_task: self.pool_per_task,
            probe_size: self.probe_size,
            refresh_period: self.refresh_every,
            solver_budget: self.solver_budget,
        }
    }

    pub fn few_shot_config(&self) -> FewShotConfig {
        FewShotConfig {
            steps: self.few_shot_steps,
            lr: self.few_shot_lr,
            optimizer: self.few_shot_optimizer,
            weight_decay: self.weight_decay,
            batch: self.few_shot_batch,
            augment: self.few_shot_augment,
        }
    }

    /// Instances per gradient batch as a function of instance size.
    pub fn batch_for_size(&self, n: usize) -> usize {
        if n > self.batch_size_threshold {
            self.batch_instances_large
        } else {
            self.batch_instances
        }
    }

    /// Canonical flat key/value rendering, sorted by key.
    pub fn to_flat(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let dists =
            self.dists.iter().map(|d| dist_to_str(d)).collect::<Vec<_>>().join(",");
        let pairs: Vec<(&str, String)> = vec![
            ("problem", self.problem.label().to_string()),
            ("seed", self.seed.to_string()),
            ("model.embed_dim", self.embed_dim.to_string()),
            ("model.layers", self.layers.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.norm", norm_to_str(self.norm).to_string()),
            ("model.feedforward_dim", self.feedforward_dim.to_string()),
            ("model.logit_clip", fmt_f64(self.logit_clip)),
            ("inner.k", self.inner_k.to_string()),
            ("inner.alpha", fmt_f64(self.alpha)),
            ("inner.optimizer", opt_to_str(self.inner_optimizer).to_string()),
            ("outer.beta", fmt_f64(self.beta)),
            ("outer.b", self.tasks_per_batch.to_string()),
            ("outer.rule", rule_to_str(self.rule).to_string()),
            ("outer.switch_fraction", fmt_f64(self.switch_fraction)),
            ("outer.total_iters", self.total_iters.to_string()),
            ("outer.lr_decay_last_fraction", fmt_f64(self.lr_decay_last_fraction)),
            ("outer.weight_decay", fmt_f64(self.weight_decay)),
            ("data.n_min", self.n_min.to_string()),
            ("data.n_max", self.n_max.to_string()),
            ("data.size_step", self.size_step.to_string()),
            ("data.dists", dists),
            ("scheduler.eta", fmt_f64(self.eta)),
            ("scheduler.curriculum_iters", self.curriculum_iters.to_string()),
            ("scheduler.pool_per_task", self.pool_per_task.to_string()),
            ("scheduler.probe_size", self.probe_size.to_string()),
            ("scheduler.refresh_every", self.refresh_every.to_string()),
            ("scheduler.solver_budget", self.solver_budget.to_string()),
            ("train.batch_instances", self.batch_instances.to_string()),
            ("train.batch_instances_large", self.batch_instances_large.to_string()),
            ("train.batch_size_threshold", self.batch_size_threshold.to_string()),
            ("train.val_every", self.val_every.to_string()),
            ("train.diagnostics_every", self.diagnostics_every.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("few_shot.steps", self.few_shot_steps.to_string()),
            ("few_shot.lr", fmt_f64(self.few_shot_lr)),
            ("few_shot.optimizer", opt_to_str(self.few_shot_optimizer).to_string()),
            ("few_shot.batch", self.few_shot_batch.to_string()),
            ("few_shot.pool", self.few_shot_pool.to_string()),
            ("few_shot.augment", self.few_shot_augment.to_string()),
            ("eval.instances", self.eval_instances.to_string()),
            ("workers", self.workers.to_string()),
        ];
        for (k, v) in pairs {
            m.insert(k.to_string(), v);
        }
        m
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_flat() {
            writeln!(s, "{} = {}", k, v).unwrap();
        }
        s
    }

    /// SHA-256 of the canonical rendering; two equal hashes mean two equal
    /// resolved configs.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }

    /// Applies one `section.key = value` assignment. Unknown keys error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::invalid_argument(format!("bad value '{}' for {}", v, what));
        match key {
            "problem" => {
                self.problem = match v {
                    "tsp" => Problem::Tsp,
                    "cvrp" => Problem::Cvrp,
                    _ => return Err(bad("problem")),
                }
            }
            "seed" => self.seed = v.parse().map_err(|_| bad(key))?,
            "model.embed_dim" => self.embed_dim = v.parse().map_err(|_| bad(key))?,
            "model.layers" => self.layers = v.parse().map_err(|_| bad(key))?,
            "model.heads" => self.heads = v.parse().map_err(|_| bad(key))?,
            "model.norm" => {
                self.norm = match v {
                    "batch_no_track" => NormKind::BatchNoTrack,
                    "instance" => NormKind::Instance,
                    "none" => NormKind::None,
                    _ => return Err(bad(key)),
                }
            }
            "model.feedforward_dim" => self.feedforward_dim = v.parse().map_err(|_| bad(key))?,
            "model.logit_clip" => self.logit_clip = v.parse().map_err(|_| bad(key))?,
            "inner.k" => self.inner_k = v.parse().map_err(|_| bad(key))?,
            "inner.alpha" => self.alpha = v.parse().map_err(|_| bad(key))?,
            "inner.optimizer" => self.inner_optimizer = parse_opt(v).ok_or_else(|| bad(key))?,
            "outer.beta" => self.beta = v.parse().map_err(|_| bad(key))?,
            "outer.b" => self.tasks_per_batch = v.parse().map_err(|_| bad(key))?,
            "outer.rule" => {
                self.rule = match v {
                    "second_order" => OuterRule::SecondOrder,
                    "fomaml" => OuterRule::Fomaml,
                    "reptile" => OuterRule::Reptile,
                    "switch" => OuterRule::Switch,
                    _ => return Err(bad(key)),
                }
            }
            "outer.switch_fraction" => self.switch_fraction = v.parse().map_err(|_| bad(key))?,
            "outer.total_iters" => self.total_iters = v.parse().map_err(|_| bad(key))?,
            "outer.lr_decay_last_fraction" => {
                self.lr_decay_last_fraction = v.parse().map_err(|_| bad(key))?
            }
            "outer.weight_decay" => self.weight_decay = v.parse().map_err(|_| bad(key))?,
            "data.n_min" => self.n_min = v.parse().map_err(|_| bad(key))?,
            "data.n_max" => self.n_max = v.parse().map_err(|_| bad(key))?,
            "data.size_step" => self.size_step = v.parse().map_err(|_| bad(key))?,
            "data.dists" => {
                self.dists = v
                    .split(',')
                    .map(|t| DistributionSpec::parse(t))
                    .collect::<Result<Vec<_>>>()?;
            }
            "scheduler.eta" => self.eta = v.parse().map_err(|_| bad(key))?,
            "scheduler.curriculum_iters" => self.curriculum_iters = v.parse().map_err(|_| bad(key))?,
            "scheduler.pool_per_task" => self.pool_per_task = v.parse().map_err(|_| bad(key))?,
            "scheduler.probe_size" => self.probe_size = v.parse().map_err(|_| bad(key))?,
            "scheduler.refresh_every" => self.refresh_every = v.parse().map_err(|_| bad(key))?,
            "scheduler.solver_budget" => self.solver_budget = v.parse().map_err(|_| bad(key))?,
            "train.batch_instances" => self.batch_instances = v.parse().map_err(|_| bad(key))?,
            "train.batch_instances_large" => {
                self.batch_instances_large = v.parse().map_err(|_| bad(key))?
            }
            "train.batch_size_threshold" => {
                self.batch_size_threshold = v.parse().map_err(|_| bad(key))?
            }
            "train.val_every" => self.val_every = v.parse().map_err(|_| bad(key))?,
            "train.diagnostics_every" => self.diagnostics_every = v.parse().map_err(|_| bad(key))?,
            "train.checkpoint_every" => self.checkpoint_every = v.parse().map_err(|_| bad(key))?,
            "few_shot.steps" => self.few_shot_steps = v.parse().map_err(|_| bad(key))?,
            "few_shot.lr" => self.few_shot_lr = v.parse().map_err(|_| bad(key))?,
            "few_shot.optimizer" => self.few_shot_optimizer = parse_opt(v).ok_or_else(|| bad(key))?,
            "few_shot.batch" => self.few_shot_batch = v.parse().map_err(|_| bad(key))?,
            "few_shot.pool" => self.few_shot_pool = v.parse().map_err(|_| bad(key))?,
            "few_shot.augment" => self.few_shot_augment = v.parse().map_err(|_| bad(key))?,
            "eval.instances" => self.eval_instances = v.parse().map_err(|_| bad(key))?,
            "workers" => self.workers = v.parse().map_err(|_| bad(key))?,
            _ => return Err(Error::invalid_argument(format!("unknown config key '{}'", key))),
        }
        Ok(())
    }

    /// Loads `section.key = value` lines over `self`.
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected 'key = value', got '{}'", line),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Round trip used to embed the resolved config in checkpoints/reports.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::desk_scale();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected 'key = value'".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip form keeps hashes stable across writes
    let mut s = format!("{}", v);
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

fn dist_to_str(d: &DistributionSpec) -> String {
    match d {
        DistributionSpec::Uniform => "uniform".into(),
        DistributionSpec::GaussianMixture { c, l } => format!("gm:{}:{}", c, l),
        DistributionSpec::Rotation => "rotation".into(),
        DistributionSpec::Explosion => "explosion".into(),
    }
}

fn norm_to_str(n: NormKind) -> &'static str {
    match n {
        NormKind::BatchNoTrack => "batch_no_track",
        NormKind::Instance => "instance",
        NormKind::None => "none",
    }
}

fn opt_to_str(o: InnerOptimizer) -> &'static str {
    match o {
        InnerOptimizer::Sgd => "sgd",
        InnerOptimizer::Adam => "adam",
    }
}

fn parse_opt(v: &str) -> Option<InnerOptimizer> {
    match v {
        "sgd" => Some(InnerOptimizer::Sgd),
        "adam" => Some(InnerOptimizer::Adam),
        _ => None,
    }
}

fn rule_to_str(r: OuterRule) -> &'static str {
    match r {
        OuterRule::SecondOrder => "second_order",
        OuterRule::Fomaml => "fomaml",
        OuterRule::Reptile => "reptile",
        OuterRule::Switch => "switch",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_documented_values() {
        let d = RunConfig::desk_scale();
        assert_eq!((d.n_min, d.n_max, d.total_iters), (10, 20, 2000));
        assert_eq!((d.inner_k, d.tasks_per_batch), (1, 1));
        assert_eq!(d.alpha, 1e-4);
        assert_eq!(d.beta, 1e-4);
        let p = RunConfig::paper_scale();
        assert_eq!((p.n_min, p.n_max, p.total_iters), (50, 200, 250_000));
        assert_eq!(p.curriculum_iters, 225_000);
        assert_eq!(p.eta, 1.0);
        assert_eq!(p.batch_instances, 64);
        assert_eq!(p.batch_for_size(200), 32);
        assert_eq!(p.batch_for_size(150), 64);
        assert_eq!(p.dists.len(), 11);
        assert_eq!(p.few_shot_lr, 1e-5);
    }

    #[test]
    fn text_round_trip_and_stable_hash() {
        let cfg = RunConfig::paper_scale();
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::desk_scale();
        assert!(cfg.set("outer.rule", "switch").is_ok());
        assert!(matches!(cfg.set("outer.unknown", "1"), Err(Error::InvalidArgument(_))));
        assert!(cfg.set("outer.rule", "sideways").is_err());
    }

    #[test]
    fn file_overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nouter.rule = reptile\ninner.k = 5\ndata.dists = uniform,gm:2:5,rotation\n").unwrap();
        let mut cfg = RunConfig::desk_scale();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.rule, OuterRule::Reptile);
        assert_eq!(cfg.inner_k, 5);
        assert_eq!(cfg.dists.len(), 3);
        assert_eq!(cfg.dists[1], DistributionSpec::gm(2, 5.0));
    }

    #[test]
    fn bad_file_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "outer.rule = switch\nnot a key value\n").unwrap();
        let mut cfg = RunConfig::desk_scale();
        match cfg.apply_file(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {:?}", other),
        }
    }
}
