//! Meta-training: inner-loop adaptation, outer-loop updates with exact
//! second-order meta-gradients or their first-order approximations, the
//! early-stop switch, gradient-direction diagnostics, and few-shot
//! adaptation at inference time.
//!
//! The second-order path differentiates through plain SGD inner steps as
//! the update rule is written; first-order rules may run Adam inner steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{make_instance, TaskSpec};
use crate::policy::{flatten, ParamLayout, ParamTensors, Policy, PolicyParams, RolloutMode};
use crate::reinforce::{exact_expected_cost, pomo_loss};
use crate::rng::{stream, Stream, StreamTag};
use crate::scheduler::SchedulerState;
use crate::tape::{grad, grad_values, Matrix, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InnerConfig {
    /// Inner gradient steps K.
    pub k: usize,
    /// Inner step size alpha.
    pub alpha: f64,
    pub optimizer: InnerOptimizer,
    /// Track the inner computation so the outer loss can differentiate
    /// through it (requires SGD inner steps).
    pub differentiable: bool,
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid_argument("inner loop needs K >= 1"));
        }
        if self.alpha < 0.0 {
            return Err(Error::invalid_argument("alpha must be >= 0"));
        }
        if self.differentiable && self.optimizer != InnerOptimizer::Sgd {
            return Err(Error::invalid_argument(
                "second-order differentiation is defined for plain SGD inner steps",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterRule {
    SecondOrder,
    Fomaml,
    Reptile,
    Switch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterConfig {
    /// Outer step size beta.
    pub beta: f64,
    /// Tasks per meta-batch B.
    pub tasks_per_batch: usize,
    pub rule: OuterRule,
    /// Iteration fraction at which `switch` changes second-order to
    /// first-order.
    pub switch_fraction: f64,
    pub total_iters: usize,
    /// Step sizes are divided by 10 in the trailing fraction of training.
    pub lr_decay_last_fraction: f64,
    pub weight_decay: f64,
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::invalid_argument("beta must be >= 0"));
        }
        if self.tasks_per_batch == 0 {
            return Err(Error::invalid_argument("meta-batch needs B >= 1"));
        }
        if self.rule == OuterRule::Switch && !(self.switch_fraction > 0.0 && self.switch_fraction <= 1.0) {
            return Err(Error::invalid_argument("switch rule needs switch_fraction in (0, 1]"));
        }
        Ok(())
    }

    /// The rule actually applied at iteration `e`.
    pub fn rule_at(&self, e: usize) -> OuterRule {
        match self.rule {
            OuterRule::Switch => {
                let boundary = (self.switch_fraction * self.total_iters as f64) as usize;
                if e < boundary {
                    OuterRule::SecondOrder
                } else {
                    OuterRule::Fomaml
                }
            }
            r => r,
        }
    }

    /// (alpha_multiplier applied, beta) after the trailing decay.
    pub fn decayed(&self, e: usize, alpha: f64) -> (f64, f64) {
        let threshold = ((1.0 - self.lr_decay_last_fraction) * self.total_iters as f64) as usize;
        if self.total_iters > 0 && e >= threshold {
            (alpha / 10.0, self.beta / 10.0)
        } else {
            (alpha, self.beta)
        }
    }
}

/// Adam with bias correction; weight decay is added to the raw gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState { m: vec![0.0; dim], v: vec![0.0; dim], step: 0 }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let b1t = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let b2t = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i] + weight_decay * params[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

/// A per-task training loss: builds a differentiable scalar for a freshly
/// sampled batch identified by `seed`. Inner steps and the outer validation
/// batch use distinct seeds (Algorithm-style data splits).
pub trait TaskLoss {
    fn layout(&self) -> &ParamLayout;
    fn loss(&self, tape: &Tape, params: &ParamTensors, seed: u64) -> Result<Tensor>;
}

/// Multi-start REINFORCE loss over M fresh instances of one task.
pub struct PomoTaskLoss<'a> {
    pub policy: &'a Policy,
    pub task: TaskSpec,
    pub batch_instances: usize,
}

impl TaskLoss for PomoTaskLoss<'_> {
    fn layout(&self) -> &ParamLayout {
        &self.policy.layout
    }

    fn loss(&self, tape: &Tape, params: &ParamTensors, seed: u64) -> Result<Tensor> {
        let mut gen_rng = stream(seed, StreamTag::InnerData, 0);
        let instances: Vec<_> = (0..self.batch_instances)
            .map(|_| make_instance(&self.task, seed, &mut gen_rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&_> = instances.iter().collect();
        let mut roll_rng = stream(seed, StreamTag::Rollout, 0);
        let batch = self.policy.rollout_batch(
            tape,
            &refs,
            params,
            RolloutMode::Sample,
            self.task.n,
            Some(&mut roll_rng),
        )?;
        let (loss, _) = pomo_loss(&batch)?;
        Ok(loss)
    }
}

/// Exact-expectation loss over fixed tiny instances; `seed` selects the
/// instance set, replacing stochastic sampling for gradient oracles.
pub struct ExactCostLoss<'a> {
    pub policy: &'a Policy,
    pub sets: Vec<Vec<crate::instances::VrpInstance>>,
}

impl TaskLoss for ExactCostLoss<'_> {
    fn layout(&self) -> &ParamLayout {
        &self.policy.layout
    }

    fn loss(&self, tape: &Tape, params: &ParamTensors, seed: u64) -> Result<Tensor> {
        let set = &self.sets[(seed as usize) % self.sets.len()];
        let mut acc: Option<Tensor> = None;
        for inst in set {
            let e = exact_expected_cost(self.policy, inst, params, tape)?;
            acc = Some(match acc {
                Some(a) => a.add(&e),
                None => e,
            });
        }
        Ok(acc.expect("non-empty instance set").scale(1.0 / set.len() as f64))
    }
}

/// Diagnostic surrogates with closed-form meta-gradients.
pub mod surrogate {
    use super::*;

    /// `L(theta) = 1/2 * sum_i a_i * theta_i^2`.
    pub struct QuadraticLoss {
        pub coeffs: Vec<f64>,
        pub layout: ParamLayout,
    }

    impl QuadraticLoss {
        pub fn new(coeffs: Vec<f64>) -> Self {
            let layout = scalar_layout(coeffs.len());
            QuadraticLoss { coeffs, layout }
        }
    }

    impl TaskLoss for QuadraticLoss {
        fn layout(&self) -> &ParamLayout {
            &self.layout
        }

        fn loss(&self, tape: &Tape, params: &ParamTensors, _seed: u64) -> Result<Tensor> {
            let a = tape.constant(Matrix::row_vec(self.coeffs.clone()));
            let theta = &params.entries[0];
            Ok(theta.mul(theta).mul(&a).sum_all().scale(0.5))
        }
    }

    /// `L(theta) = sum_i c_i * theta_i` (zero Hessian).
    pub struct LinearLoss {
        pub coeffs: Vec<f64>,
        pub layout: ParamLayout,
    }

    impl LinearLoss {
        pub fn new(coeffs: Vec<f64>) -> Self {
            let layout = scalar_layout(coeffs.len());
            LinearLoss { coeffs, layout }
        }
    }

    impl TaskLoss for LinearLoss {
        fn layout(&self) -> &ParamLayout {
            &self.layout
        }

        fn loss(&self, tape: &Tape, params: &ParamTensors, _seed: u64) -> Result<Tensor> {
            let c = tape.constant(Matrix::row_vec(self.coeffs.clone()));
            Ok(params.entries[0].mul(&c).sum_all())
        }
    }

    pub fn scalar_layout(dim: usize) -> ParamLayout {
        ParamLayout {
            entries: vec![crate::policy::LayoutEntry {
                name: "theta".into(),
                offset: 0,
                rows: 1,
                cols: dim,
            }],
            total: dim,
        }
    }

    pub fn scalar_params(values: Vec<f64>) -> PolicyParams {
        let layout = scalar_layout(values.len());
        PolicyParams { values, layout }
    }
}

/// Result of a differentiable inner adaptation: the tape retains the
/// dependence of `theta_k` on `theta0`.
pub struct InnerTrace {
    pub tape: Tape,
    pub theta0: ParamTensors,
    pub theta_k: ParamTensors,
    pub inner_losses: Vec<f64>,
}

fn seed_for(root: u64, iter: usize, task_index: usize, step: usize, val: bool) -> u64 {
    let mut z = root ^ 0x6a09e667f3bcc908;
    for part in [iter as u64, task_index as u64, step as u64, val as u64] {
        z = (z ^ part).wrapping_mul(0x100000001b3);
        z ^= z >> 29;
    }
    z
}

/// K differentiable SGD steps on fresh batches (`seeds[k]` per step).
pub fn inner_adapt_diff(
    loss: &dyn TaskLoss,
    theta0: &PolicyParams,
    cfg: &InnerConfig,
    seeds: &[u64],
) -> Result<InnerTrace> {
    cfg.validate()?;
    if !cfg.differentiable {
        return Err(Error::invalid_state("inner trace requested without differentiable=true"));
    }
    assert_eq!(seeds.len(), cfg.k, "one data seed per inner step");
    let tape = Tape::new();
    let theta0_t = ParamTensors::bind(&tape, theta0);
    let mut cur = theta0_t.clone();
    let mut inner_losses = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let l = loss.loss(&tape, &cur, seeds[k])?;
        inner_losses.push(l.scalar_value());
        let gs = grad(&l, &cur.entries);
        cur = ParamTensors {
            entries: cur
                .entries
                .iter()
                .zip(&gs)
                .map(|(p, g)| p.sub(&g.scale(cfg.alpha)))
                .collect(),
        };
    }
    Ok(InnerTrace { tape, theta0: theta0_t, theta_k: cur, inner_losses })
}

/// K value-space inner steps (SGD or Adam with fresh statistics).
pub fn inner_adapt_values(
    loss: &dyn TaskLoss,
    theta0: &PolicyParams,
    cfg: &InnerConfig,
    weight_decay: f64,
    seeds: &[u64],
) -> Result<(PolicyParams, Vec<f64>)> {
    cfg.validate()?;
    assert_eq!(seeds.len(), cfg.k);
    let mut cur = theta0.clone();
    let mut adam = AdamState::new(cur.len());
    let mut inner_losses = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let tape = Tape::new();
        let bound = ParamTensors::bind(&tape, &cur);
        let l = loss.loss(&tape, &bound, seeds[k])?;
        inner_losses.push(l.scalar_value());
        let g = flatten(loss.layout(), &grad_values(&l, &bound.entries));
        match cfg.optimizer {
            InnerOptimizer::Sgd => {
                for (p, gi) in cur.values.iter_mut().zip(&g) {
                    *p -= cfg.alpha * gi;
                }
            }
            InnerOptimizer::Adam => adam.apply(&mut cur.values, &g, cfg.alpha, weight_decay),
        }
    }
    Ok((cur, inner_losses))
}

/// Public wrapper matching the training loop's data-seed discipline.
pub fn inner_adapt(
    policy: &Policy,
    theta0: &PolicyParams,
    task: &TaskSpec,
    cfg: &InnerConfig,
    batch_instances: usize,
    root_seed: u64,
    iter: usize,
) -> Result<(PolicyParams, Vec<f64>)> {
    if batch_instances == 0 {
        return Err(Error::invalid_argument("need at least one instance per batch"));
    }
    let loss = PomoTaskLoss { policy, task: *task, batch_instances };
    let seeds: Vec<u64> = (0..cfg.k).map(|k| seed_for(root_seed, iter, 0, k, false)).collect();
    if cfg.differentiable {
        let trace = inner_adapt_diff(&loss, theta0, cfg, &seeds)?;
        let values = trace.theta_k.to_params(&policy.layout);
        Ok((values, trace.inner_losses))
    } else {
        inner_adapt_values(&loss, theta0, cfg, 0.0, &seeds)
    }
}

/// Gradients produced by one meta step on one task.
pub struct MetaGradients {
    /// Exact second-order meta-gradient w.r.t. theta0.
    pub second_order: Vec<f64>,
    /// First-order gradient at the adapted parameters (FOMAML).
    pub fomaml: Vec<f64>,
    /// Reptile pseudo-gradient `(theta0 - theta_k) / alpha`.
    pub reptile: Vec<f64>,
    pub outer_loss: f64,
    pub inner_losses: Vec<f64>,
}

/// Differentiates the validation loss at `theta_k` back through all K inner
/// steps; one reverse sweep yields the second-order and FOMAML gradients on
/// identical data.
pub fn meta_gradients(
    loss: &dyn TaskLoss,
    theta0: &PolicyParams,
    cfg: &InnerConfig,
    inner_seeds: &[u64],
    val_seed: u64,
) -> Result<MetaGradients> {
    if !cfg.differentiable {
        return Err(Error::invalid_state(
            "second-order meta-gradient needs a differentiable inner trace",
        ));
    }
    let trace = inner_adapt_diff(loss, theta0, cfg, inner_seeds)?;
    let outer = loss.loss(&trace.tape, &trace.theta_k, val_seed)?;
    let mut wrt: Vec<Tensor> = trace.theta_k.entries.clone();
    wrt.extend(trace.theta0.entries.iter().cloned());
    let grads = grad_values(&outer, &wrt);
    let k_len = trace.theta_k.entries.len();
    let fomaml = flatten(loss.layout(), &grads[..k_len]);
    let second_order = flatten(loss.layout(), &grads[k_len..]);
    let theta_k_vals = trace.theta_k.to_params(loss.layout());
    let reptile = if cfg.alpha == 0.0 {
        vec![0.0; theta0.len()]
    } else {
        theta0
            .values
            .iter()
            .zip(&theta_k_vals.values)
            .map(|(a, b)| (a - b) / cfg.alpha)
            .collect()
    };
    Ok(MetaGradients {
        second_order,
        fomaml,
        reptile,
        outer_loss: outer.scalar_value(),
        inner_losses: trace.inner_losses,
    })
}

/// Convenience wrapper for the spec'd task-based entry point.
pub fn meta_gradient_second_order(
    policy: &Policy,
    theta0: &PolicyParams,
    task: &TaskSpec,
    cfg: &InnerConfig,
    batch_instances: usize,
    root_seed: u64,
    iter: usize,
) -> Result<Vec<f64>> {
    let loss = PomoTaskLoss { policy, task: *task, batch_instances };
    let seeds: Vec<u64> = (0..cfg.k).map(|k| seed_for(root_seed, iter, 0, k, false)).collect();
    let val = seed_for(root_seed, iter, 0, cfg.k, true);
    Ok(meta_gradients(&loss, theta0, cfg, &seeds, val)?.second_order)
}

/// Meta-model plus outer optimizer statistics and the reproducibility root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub params: PolicyParams,
    pub outer_adam: AdamState,
    pub iter: usize,
    pub root_seed: u64,
}

impl MetaState {
    pub fn new(params: PolicyParams, root_seed: u64) -> Self {
        let dim = params.len();
        MetaState { params, outer_adam: AdamState::new(dim), iter: 0, root_seed }
    }
}

/// Sign-vector cosine similarities between the second-order direction and
/// its approximations, plus raw-gradient cosines for reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradDiagnostics {
    pub iter: usize,
    pub cos_so_fomaml: f64,
    pub cos_so_reptile: f64,
    pub cos_so_fomaml_first: f64,
    pub cos_so_fomaml_last: f64,
    pub cos_so_reptile_first: f64,
    pub cos_so_reptile_last: f64,
    pub cos_so_fomaml_raw: f64,
    pub cos_so_reptile_raw: f64,
}

fn sign_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }).collect()
}

/// Cosine of two vectors; 0 when either is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn sign_cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine(&sign_vec(a), &sign_vec(b))
}

/// Computes all three gradient directions on the same batches and their
/// cosine similarities (overall and on the first/last layout slices).
/// Does not update theta0.
pub fn grad_direction_report(
    loss: &dyn TaskLoss,
    theta0: &PolicyParams,
    cfg: &InnerConfig,
    inner_seeds: &[u64],
    val_seed: u64,
    iter: usize,
) -> Result<GradDiagnostics> {
    let g = meta_gradients(loss, theta0, cfg, inner_seeds, val_seed)?;
    let layout = loss.layout();
    let first = layout.first_slice();
    let last = layout.last_slice();
    Ok(GradDiagnostics {
        iter,
        cos_so_fomaml: sign_cosine(&g.second_order, &g.fomaml),
        cos_so_reptile: sign_cosine(&g.second_order, &g.reptile),
        cos_so_fomaml_first: sign_cosine(&g.second_order[first.clone()], &g.fomaml[first.clone()]),
        cos_so_fomaml_last: sign_cosine(&g.second_order[last.clone()], &g.fomaml[last.clone()]),
        cos_so_reptile_first: sign_cosine(&g.second_order[first.clone()], &g.reptile[first]),
        cos_so_reptile_last: sign_cosine(&g.second_order[last.clone()], &g.reptile[last]),
        cos_so_fomaml_raw: cosine(&g.second_order, &g.fomaml),
        cos_so_reptile_raw: cosine(&g.second_order, &g.reptile),
    })
}

/// What one outer update did (loss values per task, rule applied).
pub struct OuterReport {
    pub rule_in_effect: OuterRule,
    pub mean_outer_loss: f64,
    pub mean_inner_loss: f64,
}

/// One outer-loop update over a weighted batch of task losses.
///
/// second_order / fomaml feed the weighted gradient through the outer Adam
/// optimizer; reptile moves theta0 toward the adapted parameters directly
/// and consumes no optimizer statistics.
pub fn outer_update_with(
    state: &mut MetaState,
    losses: &[(&dyn TaskLoss, f64)],
    outer_cfg: &OuterConfig,
    inner_cfg: &InnerConfig,
) -> Result<OuterReport> {
    outer_cfg.validate()?;
    inner_cfg.validate()?;
    if losses.is_empty() {
        return Err(Error::invalid_argument("empty meta-batch"));
    }
    let wsum: f64 = losses.iter().map(|(_, w)| w).sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid_argument(format!("task weights sum to {}, expected 1", wsum)));
    }
    let e = state.iter;
    let rule = outer_cfg.rule_at(e);
    let (alpha, beta) = outer_cfg.decayed(e, inner_cfg.alpha);
    let dim = state.params.len();
    let mut outer_losses = Vec::with_capacity(losses.len());
    let mut inner_losses = Vec::new();

    match rule {
        OuterRule::SecondOrder | OuterRule::Fomaml => {
            let mut total = vec![0.0; dim];
            for (ti, (loss, w)) in losses.iter().enumerate() {
                let seeds: Vec<u64> =
                    (0..inner_cfg.k).map(|k| seed_for(state.root_seed, e, ti, k, false)).collect();
                let val_seed = seed_for(state.root_seed, e, ti, inner_cfg.k, true);
                let g = if rule == OuterRule::SecondOrder {
                    let cfg = InnerConfig {
                        alpha,
                        differentiable: true,
                        optimizer: InnerOptimizer::Sgd,
                        ..*inner_cfg
                    };
                    cfg.validate()?;
                    let mg = meta_gradients(*loss, &state.params, &cfg, &seeds, val_seed)?;
                    outer_losses.push(mg.outer_loss);
                    inner_losses.extend(mg.inner_losses);
                    mg.second_order
                } else {
                    let cfg = InnerConfig { alpha, differentiable: false, ..*inner_cfg };
                    let (theta_k, il) =
                        inner_adapt_values(*loss, &state.params, &cfg, outer_cfg.weight_decay, &seeds)?;
                    inner_losses.extend(il);
                    let tape = Tape::new();
                    let bound = ParamTensors::bind(&tape, &theta_k);
                    let l = loss.loss(&tape, &bound, val_seed)?;
                    outer_losses.push(l.scalar_value());
                    flatten(loss.layout(), &grad_values(&l, &bound.entries))
                };
                for (t, gi) in total.iter_mut().zip(&g) {
                    *t += w * gi;
                }
            }
            state.outer_adam.apply(&mut state.params.values, &total, beta, outer_cfg.weight_decay);
        }
        OuterRule::Reptile => {
            let mut delta = vec![0.0; dim];
            for (ti, (loss, w)) in losses.iter().enumerate() {
                let seeds: Vec<u64> =
                    (0..inner_cfg.k).map(|k| seed_for(state.root_seed, e, ti, k, false)).collect();
                let cfg = InnerConfig { alpha, differentiable: false, ..*inner_cfg };
                let (theta_k, il) =
                    inner_adapt_values(*loss, &state.params, &cfg, outer_cfg.weight_decay, &seeds)?;
                inner_losses.extend(il.clone());
                outer_losses.push(*il.last().unwrap());
                for i in 0..dim {
                    delta[i] += w * (theta_k.values[i] - state.params.values[i]);
                }
            }
            for i in 0..dim {
                state.params.values[i] += beta * delta[i];
            }
        }
        OuterRule::Switch => unreachable!("rule_at resolves switch"),
    }
    state.iter += 1;
    Ok(OuterReport {
        rule_in_effect: rule,
        mean_outer_loss: outer_losses.iter().sum::<f64>() / outer_losses.len() as f64,
        mean_inner_loss: if inner_losses.is_empty() {
            0.0
        } else {
            inner_losses.iter().sum::<f64>() / inner_losses.len() as f64
        },
    })
}

/// Task-based outer update: builds the POMO losses for `batch` and applies
/// one weighted update.
pub fn outer_update(
    state: &mut MetaState,
    policy: &Policy,
    batch: &[(TaskSpec, f64)],
    outer_cfg: &OuterConfig,
    inner_cfg: &InnerConfig,
    batch_instances: impl Fn(usize) -> usize,
) -> Result<OuterReport> {
    let losses: Vec<PomoTaskLoss> = batch
        .iter()
        .map(|(task, _)| PomoTaskLoss { policy, task: *task, batch_instances: batch_instances(task.n) })
        .collect();
    let pairs: Vec<(&dyn TaskLoss, f64)> = losses
        .iter()
        .map(|l| l as &dyn TaskLoss)
        .zip(batch.iter().map(|(_, w)| *w))
        .collect();
    outer_update_with(state, &pairs, outer_cfg, inner_cfg)
}

/// One metrics-log row per iteration (wall_ms is measured, everything else
/// is deterministic under the seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub task: TaskLabel,
    pub rule_in_effect: String,
    pub loss: f64,
    pub val_gap: Option<f64>,
    pub cos_so_fo: Option<f64>,
    pub cos_so_reptile: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskLabel {
    pub n: usize,
    pub dist: String,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Hardness refresh period (scheduler config mirrors this).
    pub refresh_every: usize,
    /// Validation-gap cadence (0 = never).
    pub val_every: usize,
    /// Gradient-direction diagnostics cadence (0 = never).
    pub diagnostics_every: usize,
    /// Instances per gradient batch, as a function of instance size.
    pub batch_instances: fn(usize) -> usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            refresh_every: 100,
            val_every: 100,
            diagnostics_every: 0,
            batch_instances: |_| 8,
        }
    }
}

pub struct TrainOutput {
    pub state: MetaState,
    pub metrics: Vec<MetricsRow>,
    pub diagnostics: Vec<GradDiagnostics>,
}

/// Runs the full meta-training loop for `outer_cfg.total_iters` iterations
/// starting from `state`, scheduling tasks via `scheduler`.
///
/// `on_iter` fires after every outer update (checkpoint cadence lives in
/// the caller).
pub fn meta_train(
    policy: &Policy,
    mut state: MetaState,
    scheduler: &mut SchedulerState,
    outer_cfg: &OuterConfig,
    inner_cfg: &InnerConfig,
    opts: &TrainOptions,
    mut on_iter: Option<&mut dyn FnMut(&MetaState, &MetricsRow)>,
) -> Result<TrainOutput> {
    outer_cfg.validate()?;
    inner_cfg.validate()?;
    let mut metrics = Vec::new();
    let mut diagnostics = Vec::new();
    while state.iter < outer_cfg.total_iters {
        let e = state.iter;
        let t0 = std::time::Instant::now();
        if opts.refresh_every > 0 && e > 0 && e % opts.refresh_every == 0 {
            scheduler.refresh_hardness(policy, &state.params, e, seed_for(state.root_seed, e, 0, 0, false))?;
        }
        let mut task_rng = stream(state.root_seed, StreamTag::TaskSample, e as u64);
        let batch = scheduler.sample_batch(e, outer_cfg.tasks_per_batch, &mut task_rng)?;
        let report = outer_update(
            &mut state,
            policy,
            &batch,
            outer_cfg,
            inner_cfg,
            opts.batch_instances,
        )?;

        let val_gap = if opts.val_every > 0 && (e + 1) % opts.val_every == 0 {
            Some(validation_gap(policy, &state.params, scheduler, e, state.root_seed)?)
        } else {
            None
        };
        let diag = if opts.diagnostics_every > 0 && (e + 1) % opts.diagnostics_every == 0 {
            let task = batch[0].0;
            let loss = PomoTaskLoss {
                policy,
                task,
                batch_instances: (opts.batch_instances)(task.n),
            };
            let cfg = InnerConfig {
                k: inner_cfg.k,
                alpha: inner_cfg.alpha,
                optimizer: InnerOptimizer::Sgd,
                differentiable: true,
            };
            let seeds: Vec<u64> =
                (0..cfg.k).map(|k| seed_for(state.root_seed, e, 1_000_000, k, false)).collect();
            let val_seed = seed_for(state.root_seed, e, 1_000_000, cfg.k, true);
            let d = grad_direction_report(&loss, &state.params, &cfg, &seeds, val_seed, e)?;
            diagnostics.push(d.clone());
            Some(d)
        } else {
            None
        };

        let row = MetricsRow {
            iter: e,
            task: TaskLabel { n: batch[0].0.n, dist: batch[0].0.dist.label() },
            rule_in_effect: format!("{:?}", report.rule_in_effect).to_lowercase(),
            loss: report.mean_outer_loss,
            val_gap,
            cos_so_fo: diag.as_ref().map(|d| d.cos_so_fomaml),
            cos_so_reptile: diag.as_ref().map(|d| d.cos_so_reptile),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(cb) = on_iter.as_mut() {
            cb(&state, &row);
        }
        metrics.push(row);
    }
    Ok(TrainOutput { state, metrics, diagnostics })
}

/// Greedy mean relative gap on the scheduler's current-size probe pool.
fn validation_gap(
    policy: &Policy,
    params: &PolicyParams,
    scheduler: &SchedulerState,
    e: usize,
    root_seed: u64,
) -> Result<f64> {
    // Probe the first distribution's pool at the current curriculum bucket.
    let bucket_sizes = scheduler.cfg.bucket_sizes();
    let target = scheduler.size_at(e);
    let bi = bucket_sizes.iter().enumerate().filter(|(_, &n)| n <= target).map(|(i, _)| i).last().unwrap_or(0);
    let entries = &scheduler.pool[bi][0];
    let mut rng = stream(root_seed, StreamTag::Eval, e as u64);
    let picks = subsample(entries.len(), scheduler.cfg.probe_size.min(entries.len()), &mut rng);
    let mut model = Vec::new();
    let mut oracle = Vec::new();
    for idx in picks {
        model.push(policy.greedy_cost(&entries[idx].instance, params)?);
        oracle.push(entries[idx].oracle_cost);
    }
    crate::solvers::relative_gap(&model, &oracle)
}

fn subsample(total: usize, count: usize, rng: &mut Stream) -> Vec<usize> {
    crate::solvers::subsample_indices(total, count, rng)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotConfig {
    /// Optimizer steps K.
    pub steps: usize,
    /// Fine-tuning step size.
    pub lr: f64,
    pub optimizer: InnerOptimizer,
    pub weight_decay: f64,
    /// Instances per gradient step (capped by the pool).
    pub batch: usize,
    /// Expand the pool with the eight dihedral augmentations.
    pub augment: bool,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            steps: 1,
            lr: 1e-5,
            optimizer: InnerOptimizer::Adam,
            weight_decay: 1e-6,
            batch: 64,
            augment: false,
        }
    }
}

/// Adapts `theta0` to `task` with K optimizer steps over a fresh pool of
/// `pool_size` instances (disjoint from any test instances by seed
/// discipline). `steps == 0` returns `theta0` unchanged (zero-shot).
pub fn few_shot_adapt(
    policy: &Policy,
    theta0: &PolicyParams,
    task: &TaskSpec,
    pool_size: usize,
    cfg: &FewShotConfig,
    seed: u64,
) -> Result<PolicyParams> {
    if pool_size == 0 {
        return Err(Error::invalid_argument("few-shot pool must not be empty"));
    }
    if cfg.steps == 0 {
        return Ok(theta0.clone());
    }
    let mut gen_rng = stream(seed, StreamTag::FewShot, 0);
    let mut pool = Vec::with_capacity(pool_size);
    for _ in 0..pool_size {
        pool.push(make_instance(task, seed, &mut gen_rng)?);
    }
    if cfg.augment {
        pool = pool.iter().flat_map(crate::env::augment8).collect();
    }
    let mut cur = theta0.clone();
    let mut adam = AdamState::new(cur.len());
    let mut cursor = 0usize;
    let mut roll_rng = stream(seed, StreamTag::FewShot, 1);
    for _ in 0..cfg.steps {
        let take = cfg.batch.min(pool.len());
        let refs: Vec<&_> = (0..take).map(|i| &pool[(cursor + i) % pool.len()]).collect();
        cursor = (cursor + take) % pool.len();
        let tape = Tape::new();
        let bound = ParamTensors::bind(&tape, &cur);
        let batch = policy.rollout_batch(
            &tape,
            &refs,
            &bound,
            RolloutMode::Sample,
            task.n,
            Some(&mut roll_rng),
        )?;
        let (loss, _) = pomo_loss(&batch)?;
        let g = flatten(&policy.layout, &grad_values(&loss, &bound.entries));
        match cfg.optimizer {
            InnerOptimizer::Sgd => {
                for (p, gi) in cur.values.iter_mut().zip(&g) {
                    *p -= cfg.lr * gi;
                }
            }
            InnerOptimizer::Adam => adam.apply(&mut cur.values, &g, cfg.lr, cfg.weight_decay),
        }
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::surrogate::{scalar_params, LinearLoss, QuadraticLoss};
    use super::*;

    fn sgd_inner(k: usize, alpha: f64, differentiable: bool) -> InnerConfig {
        InnerConfig { k, alpha, optimizer: InnerOptimizer::Sgd, differentiable }
    }

    #[test]
    fn quadratic_one_step_sgd() {
        // L = theta^2/2, theta0 = 1, alpha = 0.1 -> theta1 = 0.9
        let loss = QuadraticLoss::new(vec![1.0]);
        let theta0 = scalar_params(vec![1.0]);
        let trace = inner_adapt_diff(&loss, &theta0, &sgd_inner(1, 0.1, true), &[0]).unwrap();
        let v = trace.theta_k.to_params(&loss.layout);
        assert!((v.values[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_inner_steps_rejected_and_alpha_zero_is_noop() {
        let loss = QuadraticLoss::new(vec![1.0]);
        let theta0 = scalar_params(vec![1.0]);
        assert!(inner_adapt_diff(&loss, &theta0, &sgd_inner(0, 0.1, true), &[]).is_err());
        let trace = inner_adapt_diff(&loss, &theta0, &sgd_inner(3, 0.0, true), &[0, 1, 2]).unwrap();
        assert_eq!(trace.theta_k.to_params(&loss.layout).values, vec![1.0]);
    }

    #[test]
    fn quadratic_closed_forms_three_way() {
        // a=1, alpha=0.1, theta0=1: second-order 0.81, FOMAML 0.9, Reptile 1.0.
        let loss = QuadraticLoss::new(vec![1.0]);
        let theta0 = scalar_params(vec![1.0]);
        let g = meta_gradients(&loss, &theta0, &sgd_inner(1, 0.1, true), &[0], 1).unwrap();
        assert!((g.second_order[0] - 0.81).abs() < 1e-10);
        assert!((g.fomaml[0] - 0.9).abs() < 1e-10);
        assert!((g.reptile[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn quadratic_closed_form_general() {
        // Vector case with distinct curvatures, K = 1:
        // second-order a(1-alpha a)^2 theta, fomaml a(1-alpha a) theta, reptile a theta.
        let a = vec![0.5, 2.0, 1.5];
        let theta = vec![1.0, -0.7, 0.3];
        let alpha = 0.05;
        let loss = QuadraticLoss::new(a.clone());
        let theta0 = scalar_params(theta.clone());
        let g = meta_gradients(&loss, &theta0, &sgd_inner(1, alpha, true), &[0], 1).unwrap();
        for i in 0..3 {
            let so = a[i] * (1.0 - alpha * a[i]).powi(2) * theta[i];
            let fo = a[i] * (1.0 - alpha * a[i]) * theta[i];
            let re = a[i] * theta[i];
            assert!((g.second_order[i] - so).abs() < 1e-10);
            assert!((g.fomaml[i] - fo).abs() < 1e-10);
            assert!((g.reptile[i] - re).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_loss_second_order_equals_fomaml_exactly() {
        let loss = LinearLoss::new(vec![0.3, -1.2, 0.0, 2.5]);
        let theta0 = scalar_params(vec![0.1, 0.2, 0.3, 0.4]);
        let g = meta_gradients(&loss, &theta0, &sgd_inner(2, 0.07, true), &[0, 1], 2).unwrap();
        assert_eq!(g.second_order, g.fomaml, "zero Hessian: both gradients identical");
        let d = grad_direction_report(&loss, &theta0, &sgd_inner(2, 0.07, true), &[0, 1], 2, 0).unwrap();
        assert_eq!(d.cos_so_fomaml, 1.0);
    }

    #[test]
    fn reptile_k1_is_plain_gradient() {
        // (theta0 - theta1)/alpha == grad L(theta0) exactly under SGD.
        let loss = QuadraticLoss::new(vec![0.7, 1.3]);
        let theta0 = scalar_params(vec![2.0, -1.0]);
        let g = meta_gradients(&loss, &theta0, &sgd_inner(1, 0.1, true), &[0], 1).unwrap();
        let expected = [0.7 * 2.0, 1.3 * -1.0];
        for i in 0..2 {
            assert!((g.reptile[i] - expected[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn adam_inner_cannot_be_differentiable() {
        let cfg = InnerConfig { k: 1, alpha: 0.1, optimizer: InnerOptimizer::Adam, differentiable: true };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn quadratic_sign_vectors_agree_while_magnitudes_differ() {
        let loss = QuadraticLoss::new(vec![1.0]);
        let theta0 = scalar_params(vec![1.0]);
        let d = grad_direction_report(&loss, &theta0, &sgd_inner(1, 0.1, true), &[0], 1, 0).unwrap();
        assert_eq!(d.cos_so_fomaml, 1.0);
        assert_eq!(d.cos_so_reptile, 1.0);
        assert!(d.cos_so_fomaml_raw <= 1.0);
    }

    #[test]
    fn outer_update_rules_move_params_correctly() {
        let outer = OuterConfig {
            beta: 0.5,
            tasks_per_batch: 1,
            rule: OuterRule::Reptile,
            switch_fraction: 0.2,
            total_iters: 100,
            lr_decay_last_fraction: 0.1,
            weight_decay: 0.0,
        };
        let inner = sgd_inner(1, 0.1, false);
        let loss = QuadraticLoss::new(vec![1.0]);
        let mut state = MetaState::new(scalar_params(vec![1.0]), 7);
        // Reptile: theta0 + beta*(theta1 - theta0) = 1 + 0.5*(0.9 - 1) = 0.95
        outer_update_with(&mut state, &[(&loss, 1.0)], &outer, &inner).unwrap();
        assert!((state.params.values[0] - 0.95).abs() < 1e-12);
        assert_eq!(state.iter, 1);
    }

    #[test]
    fn beta_zero_leaves_params_unchanged() {
        for rule in [OuterRule::SecondOrder, OuterRule::Fomaml, OuterRule::Reptile] {
            let outer = OuterConfig {
                beta: 0.0,
                tasks_per_batch: 1,
                rule,
                switch_fraction: 0.2,
                total_iters: 10,
                lr_decay_last_fraction: 0.1,
                weight_decay: 0.0,
            };
            let inner = sgd_inner(1, 0.1, rule == OuterRule::SecondOrder);
            let loss = QuadraticLoss::new(vec![1.0]);
            let mut state = MetaState::new(scalar_params(vec![1.0]), 7);
            outer_update_with(&mut state, &[(&loss, 1.0)], &outer, &inner).unwrap();
            assert_eq!(state.params.values[0], 1.0, "rule {:?}", rule);
        }
    }

    #[test]
    fn weight_sum_violation_rejected() {
        let outer = OuterConfig {
            beta: 0.1,
            tasks_per_batch: 2,
            rule: OuterRule::Reptile,
            switch_fraction: 0.2,
            total_iters: 10,
            lr_decay_last_fraction: 0.1,
            weight_decay: 0.0,
        };
        let inner = sgd_inner(1, 0.1, false);
        let loss = QuadraticLoss::new(vec![1.0]);
        let mut state = MetaState::new(scalar_params(vec![1.0]), 7);
        let r = outer_update_with(&mut state, &[(&loss, 0.4), (&loss, 0.4)], &outer, &inner);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn switch_rule_boundary() {
        let outer = OuterConfig {
            beta: 1e-4,
            tasks_per_batch: 1,
            rule: OuterRule::Switch,
            switch_fraction: 0.2,
            total_iters: 250_000,
            lr_decay_last_fraction: 0.1,
            weight_decay: 0.0,
        };
        assert_eq!(outer.rule_at(49_999), OuterRule::SecondOrder);
        assert_eq!(outer.rule_at(50_000), OuterRule::Fomaml);
    }

    #[test]
    fn lr_decay_divides_by_ten_in_the_tail() {
        let outer = OuterConfig {
            beta: 1e-3,
            tasks_per_batch: 1,
            rule: OuterRule::Fomaml,
            switch_fraction: 0.2,
            total_iters: 1000,
            lr_decay_last_fraction: 0.1,
            weight_decay: 0.0,
        };
        let (a, b) = outer.decayed(899, 1e-2);
        assert_eq!((a, b), (1e-2, 1e-3));
        let (a, b) = outer.decayed(900, 1e-2);
        assert!((a - 1e-3).abs() < 1e-18 && (b - 1e-4).abs() < 1e-19);
    }

    #[test]
    fn few_shot_zero_steps_is_zero_shot() {
        let policy = Policy::new(crate::policy::ModelConfig::tiny(crate::instances::Problem::Tsp)).unwrap();
        let theta0 = policy.init(&mut stream(1, StreamTag::ParamInit, 0));
        let task = TaskSpec::new(
            crate::instances::Problem::Tsp,
            5,
            crate::instances::DistributionSpec::Uniform,
        );
        let cfg = FewShotConfig { steps: 0, ..Default::default() };
        let out = few_shot_adapt(&policy, &theta0, &task, 16, &cfg, 3).unwrap();
        assert_eq!(out, theta0);
        let err = few_shot_adapt(&policy, &theta0, &task, 0, &cfg, 3);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn few_shot_step_changes_params() {
        let policy = Policy::new(crate::policy::ModelConfig::tiny(crate::instances::Problem::Tsp)).unwrap();
        let theta0 = policy.init(&mut stream(2, StreamTag::ParamInit, 0));
        let task = TaskSpec::new(
            crate::instances::Problem::Tsp,
            5,
            crate::instances::DistributionSpec::Uniform,
        );
        let cfg = FewShotConfig { steps: 1, lr: 1e-3, batch: 8, ..Default::default() };
        let out = few_shot_adapt(&policy, &theta0, &task, 8, &cfg, 3).unwrap();
        assert_ne!(out, theta0);
        // deterministic under the same seed
        let out2 = few_shot_adapt(&policy, &theta0, &task, 8, &cfg, 3).unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn tiny_policy_second_order_matches_composed_finite_differences() {
        // Exact-expectation losses make the composed objective
        // deterministic, so central differences in theta0 are a true oracle.
        use crate::instances::{instance_from_seed, DistributionSpec, Problem, TaskSpec};
        let policy = Policy::new(crate::policy::ModelConfig::tiny(Problem::Tsp)).unwrap();
        let mk = |seed| {
            instance_from_seed(&TaskSpec::new(Problem::Tsp, 4, DistributionSpec::Uniform), seed).unwrap()
        };
        let loss = ExactCostLoss { policy: &policy, sets: vec![vec![mk(1), mk(2)], vec![mk(3), mk(4)]] };
        let theta0 = policy.init(&mut stream(5, StreamTag::ParamInit, 0));

        for k in [1usize, 2] {
            let seeds: Vec<u64> = (0..k as u64).collect(); // sets 0/1 alternate
            let cfg = sgd_inner(k, 0.05, true);
            let g = meta_gradients(&loss, &theta0, &cfg, &seeds, 1).unwrap();

            let composed = |p: &PolicyParams| -> f64 {
                let trace = inner_adapt_diff(&loss, p, &cfg, &seeds).unwrap();
                loss.loss(&trace.tape, &trace.theta_k, 1).unwrap().scalar_value()
            };
            let fd = crate::policy::finite_difference(&theta0, 1e-4, composed);
            let err = crate::policy::rel_l2(&g.second_order, &fd);
            assert!(err < 1e-3, "K={}: relative error {}", k, err);
        }
    }
}
