//! Policy-gradient estimation: multi-start REINFORCE with the shared
//! per-instance mean baseline, plus an exact-expectation enumeration oracle
//! for tiny instances.
//!
//! The surrogate loss is
//! `1/(M*S) * sum_m sum_s (c(tau_s^m) - b_m) * log p(tau_s^m)` with
//! `b_m` the mean cost over the instance's starts. Costs and advantages are
//! detached: gradients flow only through the log-probabilities.

use crate::env::{apply_action, feasible_actions, init_single_start, solution_cost};
use crate::error::{Error, Result};
use crate::instances::{Problem, Rounding, VrpInstance};
use crate::policy::{ParamTensors, Policy, RolloutMode, TrajectoryBatch};
use crate::tape::{Matrix, Tape, Tensor};

/// Scalar loss plus the bookkeeping the trainer logs.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    /// Advantages `c - b` per (instance, start); each row sums to ~0.
    pub advantages: Vec<Vec<f64>>,
    /// Shared baseline per instance: the mean cost over its starts.
    pub baselines: Vec<f64>,
    pub num_instances: usize,
    pub num_starts: usize,
}

/// Per-instance advantages against the mean-over-starts baseline.
pub fn advantages(costs: &[f64]) -> (Vec<f64>, f64) {
    let baseline = costs.iter().sum::<f64>() / costs.len() as f64;
    (costs.iter().map(|c| c - baseline).collect(), baseline)
}

/// Builds the multi-start REINFORCE surrogate on the batch's tape.
///
/// Requires sampled trajectories: with greedy rollouts the shared baseline
/// degenerates. A 1x1 batch (single instance, single start) is rejected for
/// the same reason.
pub fn pomo_loss(batch: &TrajectoryBatch) -> Result<(Tensor, LossReport)> {
    if batch.mode != RolloutMode::Sample {
        return Err(Error::invalid_argument(
            "pomo_loss needs sampled trajectories (greedy baseline is degenerate)",
        ));
    }
    let m = batch.num_instances();
    let s = batch.num_starts;
    if m == 0 {
        return Err(Error::invalid_argument("empty trajectory batch"));
    }
    if m * s == 1 {
        return Err(Error::invalid_argument(
            "batch of one instance with one start has an identically zero loss",
        ));
    }
    let tape = batch.per_instance[0].total_log_prob.tape().clone();
    let mut adv_rows = Vec::with_capacity(m);
    let mut baselines = Vec::with_capacity(m);
    let mut acc: Option<Tensor> = None;
    for inst in &batch.per_instance {
        let (adv, baseline) = advantages(&inst.costs);
        let adv_t = tape.constant(Matrix::col_vec(adv.clone()));
        let term = adv_t.mul(&inst.total_log_prob).sum_all();
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
        adv_rows.push(adv);
        baselines.push(baseline);
    }
    let loss = acc.unwrap().scale(1.0 / (m * s) as f64);
    let report = LossReport {
        loss: loss.scalar_value(),
        advantages: adv_rows,
        baselines,
        num_instances: m,
        num_starts: s,
    };
    Ok((loss, report))
}

/// All complete trajectories from one start, with their tape
/// log-probabilities and costs.
pub struct EnumeratedTrajectory {
    pub order: Vec<usize>,
    pub log_prob: Tensor,
    pub cost: f64,
}

/// Enumerates every trajectory of `instance` beginning at `start`,
/// differentiable through the per-step log-probabilities.
pub fn enumerate_trajectories(
    policy: &Policy,
    instance: &VrpInstance,
    params: &ParamTensors,
    tape: &Tape,
    start: usize,
) -> Result<Vec<EnumeratedTrajectory>> {
    if instance.task.problem != Problem::Tsp {
        return Err(Error::UnsupportedFormat("trajectory enumeration supports TSP only".into()));
    }
    let enc = policy.encode(tape, &[instance], params).remove(0);
    let cache = policy.decoder_cache(enc.0, enc.1, params);
    let state = init_single_start(instance, start)?;
    let zero = tape.constant(Matrix::zeros(1, 1));
    let mut out = Vec::new();
    // Depth-first over feasible actions, sharing prefix tensors.
    fn walk(
        policy: &Policy,
        instance: &VrpInstance,
        params: &ParamTensors,
        cache: &crate::policy::DecoderCache,
        state: &crate::env::RolloutState,
        acc: &Tensor,
        out: &mut Vec<EnumeratedTrajectory>,
    ) -> Result<()> {
        if state.is_terminal() {
            let order = state.starts[0].order.clone();
            let cost = solution_cost(&order, instance, Rounding::Exact)?;
            out.push(EnumeratedTrajectory { order, log_prob: acc.clone(), cost });
            return Ok(());
        }
        let masks = feasible_actions(state, instance)?;
        let logp = policy.decode_step(cache, state, &masks, params);
        for a in 0..masks[0].len() {
            if !masks[0][a] {
                continue;
            }
            let child = acc.add(&logp.gather_per_row(&[a]));
            let mut next = state.clone();
            apply_action(&mut next, &[a], instance);
            walk(policy, instance, params, cache, &next, &child, out)?;
        }
        Ok(())
    }
    walk(policy, instance, params, &cache, &state, &zero, &mut out)?;
    Ok(out)
}

/// Exact expected tour cost under the policy, averaged over all `n` POMO
/// starts, as a differentiable tape scalar:
/// `E = 1/S * sum_s sum_tau p(tau|s) c(tau)`.
///
/// Enumeration is exponential; sizes above 6 are rejected.
pub fn exact_expected_cost(
    policy: &Policy,
    instance: &VrpInstance,
    params: &ParamTensors,
    tape: &Tape,
) -> Result<Tensor> {
    let n = instance.n();
    if n > 6 {
        return Err(Error::invalid_argument(format!(
            "exact expectation enumerates all tours; n={} is too large (max 6)",
            n
        )));
    }
    let mut acc: Option<Tensor> = None;
    for start in 0..n {
        for traj in enumerate_trajectories(policy, instance, params, tape, start)? {
            let term = traj.log_prob.exp().scale(traj.cost);
            acc = Some(match acc {
                Some(a) => a.add(&term),
                None => term,
            });
        }
    }
    Ok(acc.expect("at least one trajectory").scale(1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{instance_from_seed, DistributionSpec, Point, TaskSpec};
    use crate::policy::{
        finite_difference, flatten, rel_l2, ModelConfig, ParamTensors, Policy, PolicyParams,
    };
    use crate::rng::{stream, Stream, StreamTag};
    use crate::tape::grad_values;

    fn rng(seed: u64) -> Stream {
        stream(seed, StreamTag::Rollout, 0)
    }

    fn square_instance() -> VrpInstance {
        VrpInstance {
            task: TaskSpec::new(Problem::Tsp, 4, DistributionSpec::Uniform),
            seed: 0,
            coords: vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(1.0, 1.0),
                Point::new(0.0, 1.0),
            ],
            depot: None,
            demands_raw: None,
            capacity_raw: None,
            rounding: Rounding::Exact,
            name: None,
        }
    }

    fn tiny_policy() -> Policy {
        Policy::new(ModelConfig::tiny(Problem::Tsp)).unwrap()
    }

    #[test]
    fn advantages_sum_to_zero() {
        let (adv, b) = advantages(&[3.0, 5.0, 4.0, 8.0]);
        assert!((adv.iter().sum::<f64>()).abs() < 1e-12);
        assert!((b - 5.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_batch_rejected() {
        let policy = tiny_policy();
        let params = policy.init(&mut rng(1));
        let inst = square_instance();
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let batch = policy
            .rollout_batch(&tape, &[&inst], &bound, RolloutMode::Greedy, 4, None)
            .unwrap();
        assert!(matches!(pomo_loss(&batch), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_trajectory_batch_rejected() {
        let policy = tiny_policy();
        let params = policy.init(&mut rng(1));
        let inst = square_instance();
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let mut r = rng(2);
        let batch = policy
            .rollout_batch(&tape, &[&inst], &bound, RolloutMode::Sample, 1, Some(&mut r))
            .unwrap();
        assert!(matches!(pomo_loss(&batch), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn equal_costs_give_zero_gradient() {
        // Equilateral-ish: all tours of a triangle have equal cost, so the
        // advantages vanish and so does the gradient.
        let mut inst = square_instance();
        inst.coords = vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.5, 0.8)];
        inst.task.n = 3;
        let policy = tiny_policy();
        let params = policy.init(&mut rng(3));
        let tape = Tape::new();
        let bound = ParamTensors::bind(&tape, &params);
        let mut r = rng(4);
        let batch = policy
            .rollout_batch(&tape, &[&inst], &bound, RolloutMode::Sample, 3, Some(&mut r))
            .unwrap();
        let (loss, report) = pomo_loss(&batch).unwrap();
        assert!(report.advantages[0].iter().all(|a| a.abs() < 1e-12));
        assert!(report.loss.abs() < 1e-12);
        let grads = grad_values(&loss, &bound.entries);
        for g in grads {
            assert!(g.data.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn uniform_policy_expectation_is_mean_tour_length() {
        let inst = square_instance();
        let policy = tiny_policy();
        let params = PolicyParams::zeros(&policy.layout);
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let e = exact_expected_cost(&policy, &inst, &bound, &tape).unwrap().scalar_value();
        // From any fixed start: 6 tours; 2 are the perimeter (4.0) and 4
        // cross a diagonal (2 + 2*sqrt(2)).
        let expected = (2.0 * 4.0 + 4.0 * (2.0 + 2.0 * 2f64.sqrt())) / 6.0;
        assert!((e - expected).abs() < 1e-9, "{} vs {}", e, expected);
    }

    #[test]
    fn degenerate_two_node_expectation_is_exact() {
        // n=2: a single trajectory per start, probability one.
        let mut inst = square_instance();
        inst.coords.truncate(2);
        inst.task.n = 2;
        let policy = tiny_policy();
        let params = policy.init(&mut rng(5));
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let e = exact_expected_cost(&policy, &inst, &bound, &tape).unwrap().scalar_value();
        assert!((e - 2.0).abs() < 1e-12);
    }

    #[test]
    fn expectation_oversize_rejected() {
        let inst = instance_from_seed(&TaskSpec::new(Problem::Tsp, 7, DistributionSpec::Uniform), 1).unwrap();
        let policy = tiny_policy();
        let params = policy.init(&mut rng(6));
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        assert!(matches!(
            exact_expected_cost(&policy, &inst, &bound, &tape),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let inst = square_instance();
        let policy = tiny_policy();
        let params = policy.init(&mut rng(7));

        let tape = Tape::new();
        let bound = ParamTensors::bind(&tape, &params);
        let e = exact_expected_cost(&policy, &inst, &bound, &tape).unwrap();
        let analytic = flatten(&policy.layout, &grad_values(&e, &bound.entries));

        let fd = finite_difference(&params, 1e-5, |p| {
            let t = Tape::new();
            let b = ParamTensors::bind_frozen(&t, p);
            exact_expected_cost(&policy, &inst, &b, &t).unwrap().scalar_value()
        });
        let err = rel_l2(&analytic, &fd);
        assert!(err < 1e-4, "relative error {}", err);
    }

    /// Expectation of the estimator over the joint trajectory distribution.
    ///
    /// With the shared empirical baseline `b = mean_s c(tau_s)`, the exact
    /// identity is `E[grad pomo_loss] = (1 - 1/S) * grad E[c]`; replacing
    /// the baseline by its expectation recovers `grad E[c]` exactly.
    #[test]
    fn estimator_expectation_identities() {
        let inst = square_instance();
        let policy = tiny_policy();
        let params = policy.init(&mut rng(8));
        let n = inst.n();
        let dim = params.len();

        let tape = Tape::new();
        let bound = ParamTensors::bind(&tape, &params);

        // Exact gradient of the expected cost.
        let e = exact_expected_cost(&policy, &inst, &bound, &tape).unwrap();
        let grad_e = flatten(&policy.layout, &grad_values(&e, &bound.entries));

        // Per start: probabilities, costs and score vectors per trajectory.
        let mut probs: Vec<Vec<f64>> = Vec::new();
        let mut costs: Vec<Vec<f64>> = Vec::new();
        let mut scores: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut mean_cost_per_start = Vec::new();
        for start in 0..n {
            let trajs = enumerate_trajectories(&policy, &inst, &bound, &tape, start).unwrap();
            let p: Vec<f64> = trajs.iter().map(|t| t.log_prob.scalar_value().exp()).collect();
            let c: Vec<f64> = trajs.iter().map(|t| t.cost).collect();
            let sc: Vec<Vec<f64>> = trajs
                .iter()
                .map(|t| flatten(&policy.layout, &grad_values(&t.log_prob, &bound.entries)))
                .collect();
            mean_cost_per_start.push(p.iter().zip(&c).map(|(pi, ci)| pi * ci).sum::<f64>());
            probs.push(p);
            costs.push(c);
            scores.push(sc);
        }

        // E[c_s grad log p_s] per start, and E[grad log p_s] (must be ~0).
        let mut exp_c_score = vec![vec![0.0; dim]; n];
        let mut exp_score = vec![vec![0.0; dim]; n];
        for s in 0..n {
            for t in 0..probs[s].len() {
                for k in 0..dim {
                    exp_c_score[s][k] += probs[s][t] * costs[s][t] * scores[s][t][k];
                    exp_score[s][k] += probs[s][t] * scores[s][t][k];
                }
            }
        }
        for s in 0..n {
            for k in 0..dim {
                assert!(exp_score[s][k].abs() < 1e-9, "score expectation must vanish");
            }
        }

        // Shared empirical baseline: E[ghat] = (1/S) sum_s (1 - 1/S) E[c_s grad log p_s].
        let s_count = n as f64;
        let mut lhs = vec![0.0; dim];
        for s in 0..n {
            for k in 0..dim {
                lhs[k] += (1.0 - 1.0 / s_count) * exp_c_score[s][k] / s_count;
            }
        }
        let scaled_grad_e: Vec<f64> = grad_e.iter().map(|g| g * (1.0 - 1.0 / s_count)).collect();
        for k in 0..dim {
            assert!(
                (lhs[k] - scaled_grad_e[k]).abs() < 1e-6,
                "shared-baseline identity failed at {}: {} vs {}",
                k,
                lhs[k],
                scaled_grad_e[k]
            );
        }

        // Fixed baseline b = E[b] recovers the exact gradient.
        let b_const: f64 = mean_cost_per_start.iter().sum::<f64>() / s_count;
        let mut fixed = vec![0.0; dim];
        for s in 0..n {
            for k in 0..dim {
                fixed[k] += (exp_c_score[s][k] - b_const * exp_score[s][k]) / s_count;
            }
        }
        for k in 0..dim {
            assert!(
                (fixed[k] - grad_e[k]).abs() < 1e-6,
                "fixed-baseline identity failed at {}: {} vs {}",
                k,
                fixed[k],
                grad_e[k]
            );
        }

        // Brute force over the joint outcome space: every S-tuple of
        // trajectories, weighted by its product probability, through the
        // estimator exactly as pomo_loss's gradient composes it.
        let counts: Vec<usize> = probs.iter().map(|p| p.len()).collect();
        let mut joint = vec![0.0; dim];
        let mut idx = vec![0usize; n];
        loop {
            let mut w = 1.0;
            for s in 0..n {
                w *= probs[s][idx[s]];
            }
            let b: f64 = (0..n).map(|s| costs[s][idx[s]]).sum::<f64>() / s_count;
            for s in 0..n {
                let adv = costs[s][idx[s]] - b;
                for k in 0..dim {
                    joint[k] += w * adv * scores[s][idx[s]][k] / s_count;
                }
            }
            // mixed-radix increment
            let mut pos = 0;
            loop {
                idx[pos] += 1;
                if idx[pos] < counts[pos] {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
                if pos == n {
                    break;
                }
            }
            if pos == n {
                break;
            }
        }
        for k in 0..dim {
            assert!(
                (joint[k] - scaled_grad_e[k]).abs() < 1e-6,
                "joint enumeration failed at {}: {} vs {}",
                k,
                joint[k],
                scaled_grad_e[k]
            );
        }
    }

    #[test]
    fn pomo_loss_gradient_composes_advantages_and_scores() {
        // On one fixed sampled batch, the tape gradient of pomo_loss must
        // equal (1/(M*S)) sum (c - b) * grad log p assembled by hand.
        let inst = square_instance();
        let policy = tiny_policy();
        let params = policy.init(&mut rng(9));
        let tape = Tape::new();
        let bound = ParamTensors::bind(&tape, &params);
        let mut r = rng(10);
        let batch = policy
            .rollout_batch(&tape, &[&inst], &bound, RolloutMode::Sample, 4, Some(&mut r))
            .unwrap();
        let (loss, report) = pomo_loss(&batch).unwrap();
        let auto = flatten(&policy.layout, &grad_values(&loss, &bound.entries));

        let mut manual = vec![0.0; params.len()];
        let traj = &batch.per_instance[0];
        for s in 0..4 {
            // score of trajectory s alone
            let lp_s = traj.total_log_prob.slice_rows(s, s + 1).sum_all();
            let score = flatten(&policy.layout, &grad_values(&lp_s, &bound.entries));
            for k in 0..manual.len() {
                manual[k] += report.advantages[0][s] * score[k] / 4.0;
            }
        }
        for k in 0..manual.len() {
            assert!((auto[k] - manual[k]).abs() < 1e-9);
        }
    }
}
