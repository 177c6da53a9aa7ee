//! Encoder-decoder attention policy over a flat parameter vector.
//!
//! Parameters live in a named-slice layout so the same vector can be bound
//! onto a tape as leaves (training), rebuilt from adapted tensors
//! (inner-loop updates), or serialized exactly (checkpoints). All forward
//! passes are tape expressions; log-probabilities of rollouts are
//! differentiable through every step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{apply_action, feasible_actions, init_multistart, RolloutState};
use crate::error::{Error, Result};
use crate::instances::{Problem, VrpInstance};
use crate::rng::Stream;
use crate::tape::{log_softmax_rows, softmax_rows, Matrix, Tape, Tensor};

/// Additive mask for infeasible actions; exp underflows to exactly zero.
const MASK_NEG: f64 = -1e9;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Batch statistics of the current forward only, no running averages.
    BatchNoTrack,
    /// Statistics per instance block.
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub problem: Problem,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub norm: NormKind,
    pub feedforward_dim: usize,
    /// Logit clipping constant C in `C * tanh(..)`.
    pub logit_clip: f64,
}

impl ModelConfig {
    pub fn default_for(problem: Problem) -> Self {
        ModelConfig {
            problem,
            embed_dim: 64,
            layers: 3,
            heads: 4,
            norm: NormKind::BatchNoTrack,
            feedforward_dim: 256,
            logit_clip: 10.0,
        }
    }

    /// Minimal network for gradient-oracle tests.
    pub fn tiny(problem: Problem) -> Self {
        ModelConfig {
            problem,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            norm: NormKind::None,
            feedforward_dim: 16,
            logit_clip: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::invalid_argument("model dimensions must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid_argument(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    fn feature_dim(&self) -> usize {
        match self.problem {
            Problem::Tsp => 2,
            Problem::Cvrp => 4, // (x, y, demand, depot flag)
        }
    }

    fn context_dim(&self) -> usize {
        match self.problem {
            Problem::Tsp => 2 * self.embed_dim,
            Problem::Cvrp => 2 * self.embed_dim + 1,
        }
    }
}

/// Ordered registry of named parameter slices in one flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamLayout {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let ff = cfg.feedforward_dim;
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let push = |name: String, rows: usize, cols: usize, offset: &mut usize, entries: &mut Vec<LayoutEntry>| {
            entries.push(LayoutEntry { name, offset: *offset, rows, cols });
            *offset += rows * cols;
        };
        push("embed.w".into(), cfg.feature_dim(), d, &mut offset, &mut entries);
        push("embed.b".into(), 1, d, &mut offset, &mut entries);
        for l in 0..cfg.layers {
            for part in ["wq", "wk", "wv", "wo"] {
                push(format!("enc{}.{}", l, part), d, d, &mut offset, &mut entries);
            }
            if cfg.norm != NormKind::None {
                push(format!("enc{}.norm1.gamma", l), 1, d, &mut offset, &mut entries);
                push(format!("enc{}.norm1.beta", l), 1, d, &mut offset, &mut entries);
            }
            push(format!("enc{}.ff.w1", l), d, ff, &mut offset, &mut entries);
            push(format!("enc{}.ff.b1", l), 1, ff, &mut offset, &mut entries);
            push(format!("enc{}.ff.w2", l), ff, d, &mut offset, &mut entries);
            push(format!("enc{}.ff.b2", l), 1, d, &mut offset, &mut entries);
            if cfg.norm != NormKind::None {
                push(format!("enc{}.norm2.gamma", l), 1, d, &mut offset, &mut entries);
                push(format!("enc{}.norm2.beta", l), 1, d, &mut offset, &mut entries);
            }
        }
        push("dec.wq".into(), cfg.context_dim(), d, &mut offset, &mut entries);
        push("dec.wk".into(), d, d, &mut offset, &mut entries);
        push("dec.wv".into(), d, d, &mut offset, &mut entries);
        push("dec.wo".into(), d, d, &mut offset, &mut entries);
        push("dec.wkl".into(), d, d, &mut offset, &mut entries);
        Ok(ParamLayout { entries, total: offset })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Slice range of the first layout entry (input embedding weights).
    pub fn first_slice(&self) -> std::ops::Range<usize> {
        let e = &self.entries[0];
        e.offset..e.offset + e.rows * e.cols
    }

    /// Slice range of the last layout entry (final decoder projection).
    pub fn last_slice(&self) -> std::ops::Range<usize> {
        let e = self.entries.last().unwrap();
        e.offset..e.offset + e.rows * e.cols
    }
}

/// Flat parameter vector plus its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl PolicyParams {
    pub fn zeros(layout: &ParamLayout) -> Self {
        PolicyParams { values: vec![0.0; layout.total], layout: layout.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry_matrix(&self, idx: usize) -> Matrix {
        let e = &self.layout.entries[idx];
        Matrix::new(e.rows, e.cols, self.values[e.offset..e.offset + e.rows * e.cols].to_vec())
    }
}

/// Weights drawn from a fan-in-scaled uniform distribution; biases zero;
/// normalization gammas one, betas zero. Deterministic under the stream.
pub fn init_params(cfg: &ModelConfig, rng: &mut Stream) -> Result<PolicyParams> {
    let layout = ParamLayout::build(cfg)?;
    let mut values = vec![0.0; layout.total];
    for e in &layout.entries {
        let slot = &mut values[e.offset..e.offset + e.rows * e.cols];
        if e.name.ends_with(".gamma") {
            slot.fill(1.0);
        } else if e.name.ends_with(".beta") || e.name.ends_with(".b")
            || e.name.ends_with(".b1") || e.name.ends_with(".b2")
        {
            slot.fill(0.0);
        } else {
            let bound = 1.0 / (e.rows as f64).sqrt();
            for v in slot.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }
    Ok(PolicyParams { values, layout })
}

/// Layout-aligned parameter tensors on one tape.
#[derive(Clone)]
pub struct ParamTensors {
    pub entries: Vec<Tensor>,
}

impl ParamTensors {
    /// Binds a flat vector as differentiable leaves.
    pub fn bind(tape: &Tape, params: &PolicyParams) -> Self {
        let entries = (0..params.layout.entries.len())
            .map(|i| tape.param(params.entry_matrix(i)))
            .collect();
        ParamTensors { entries }
    }

    /// Binds as constants (evaluation-only forward passes).
    pub fn bind_frozen(tape: &Tape, params: &PolicyParams) -> Self {
        let entries = (0..params.layout.entries.len())
            .map(|i| tape.constant(params.entry_matrix(i)))
            .collect();
        ParamTensors { entries }
    }

    pub fn get(&self, layout: &ParamLayout, name: &str) -> Tensor {
        let idx = layout.index_of(name).unwrap_or_else(|| panic!("no layout entry {}", name));
        self.entries[idx].clone()
    }

    /// Reads current tensor values back into a flat vector.
    pub fn to_params(&self, layout: &ParamLayout) -> PolicyParams {
        let mut values = vec![0.0; layout.total];
        for (e, t) in layout.entries.iter().zip(&self.entries) {
            let v = t.value_clone();
            values[e.offset..e.offset + e.rows * e.cols].copy_from_slice(&v.data);
        }
        PolicyParams { values, layout: layout.clone() }
    }
}

/// Flattens layout-aligned matrices (e.g. gradients) into one vector.
pub fn flatten(layout: &ParamLayout, mats: &[Matrix]) -> Vec<f64> {
    let mut out = vec![0.0; layout.total];
    for (e, m) in layout.entries.iter().zip(mats) {
        out[e.offset..e.offset + e.rows * e.cols].copy_from_slice(&m.data);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    Greedy,
    Sample,
}

/// Trajectories of one instance under `S` starts.
pub struct InstanceTrajectories {
    pub orders: Vec<Vec<usize>>,
    pub costs: Vec<f64>,
    pub step_log_probs: Vec<Vec<f64>>,
    /// `S x 1` tape tensor: total log-probability per start.
    pub total_log_prob: Tensor,
}

/// Rollouts over a batch of same-sized instances.
pub struct TrajectoryBatch {
    pub per_instance: Vec<InstanceTrajectories>,
    pub mode: RolloutMode,
    pub num_starts: usize,
}

impl TrajectoryBatch {
    pub fn num_instances(&self) -> usize {
        self.per_instance.len()
    }
}

pub struct Policy {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
}

/// Per-instance decoder cache: embeddings and projected keys/values.
pub struct DecoderCache {
    emb: Tensor,
    graph_ctx: Tensor,
    kt_heads: Vec<Tensor>,
    v_heads: Vec<Tensor>,
    klt: Tensor,
    rows: usize,
}

impl Policy {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let layout = ParamLayout::build(&cfg)?;
        Ok(Policy { cfg, layout })
    }

    pub fn init(&self, rng: &mut Stream) -> PolicyParams {
        init_params(&self.cfg, rng).expect("layout already validated")
    }

    fn rows_per_instance(&self, n: usize) -> usize {
        match self.cfg.problem {
            Problem::Tsp => n,
            Problem::Cvrp => n + 1,
        }
    }

    fn features(&self, instance: &VrpInstance) -> Matrix {
        match self.cfg.problem {
            Problem::Tsp => {
                Matrix::from_fn(instance.n(), 2, |r, c| {
                    let p = instance.coords[r];
                    if c == 0 {
                        p.x
                    } else {
                        p.y
                    }
                })
            }
            Problem::Cvrp => {
                let depot = instance.depot.expect("cvrp instance without depot");
                Matrix::from_fn(instance.n() + 1, 4, |r, c| {
                    if r == 0 {
                        match c {
                            0 => depot.x,
                            1 => depot.y,
                            2 => 0.0,
                            _ => 1.0,
                        }
                    } else {
                        let p = instance.coords[r - 1];
                        match c {
                            0 => p.x,
                            1 => p.y,
                            2 => instance.demand(r - 1),
                            _ => 0.0,
                        }
                    }
                })
            }
        }
    }

    fn normalize(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, instance_rows: usize) -> Tensor {
        let total_rows = x.rows();
        let block = match self.cfg.norm {
            NormKind::BatchNoTrack => total_rows,
            NormKind::Instance => instance_rows,
            NormKind::None => return x.clone(),
        };
        let inv = 1.0 / block as f64;
        let mean = x.block_sum_rows(block).scale(inv);
        let centered = x.sub(&mean.block_repeat_rows(block));
        let var = centered.mul(&centered).block_sum_rows(block).scale(inv);
        let std = var.offset(NORM_EPS).sqrt().block_repeat_rows(block);
        centered.div(&std).mul(&gamma.repeat_rows(total_rows)).add_row_vec(beta)
    }

    fn attention_block(&self, h_inst: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor) -> Tensor {
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = h_inst.matmul(wq);
        let k = h_inst.matmul(wk);
        let v = h_inst.matmul(wv);
        let tape = q.tape().clone();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for hd in 0..self.cfg.heads {
            let (from, to) = (hd * dh, (hd + 1) * dh);
            let qh = q.slice_cols(from, to);
            let kh = k.slice_cols(from, to);
            let vh = v.slice_cols(from, to);
            let scores = qh.matmul(&kh.t()).scale(scale);
            let attn = softmax_rows(&scores);
            heads.push(attn.matmul(&vh));
        }
        tape.concat_cols(&heads).matmul(wo)
    }

    /// Encodes a batch of same-shaped instances. Norm statistics pool over
    /// the whole batch for `batch_no_track` and per instance otherwise.
    /// Returns one embedding tensor per instance plus its graph context.
    pub fn encode(
        &self,
        tape: &Tape,
        instances: &[&VrpInstance],
        params: &ParamTensors,
    ) -> Vec<(Tensor, Tensor)> {
        assert!(!instances.is_empty());
        let n = instances[0].n();
        assert!(
            instances.iter().all(|i| i.n() == n),
            "encode batch must share one instance size"
        );
        let rows = self.rows_per_instance(n);
        let feats: Vec<Matrix> = instances.iter().map(|i| self.features(i)).collect();
        let mut stacked = Vec::new();
        for f in &feats {
            stacked.extend_from_slice(&f.data);
        }
        let batch_rows = rows * instances.len();
        let x = tape.constant(Matrix::new(batch_rows, feats[0].cols, stacked));

        let w_in = params.get(&self.layout, "embed.w");
        let b_in = params.get(&self.layout, "embed.b");
        let mut h = x.matmul(&w_in).add_row_vec(&b_in);

        for l in 0..self.cfg.layers {
            let wq = params.get(&self.layout, &format!("enc{}.wq", l));
            let wk = params.get(&self.layout, &format!("enc{}.wk", l));
            let wv = params.get(&self.layout, &format!("enc{}.wv", l));
            let wo = params.get(&self.layout, &format!("enc{}.wo", l));
            let per_inst: Vec<Tensor> = (0..instances.len())
                .map(|i| {
                    let hi = h.slice_rows(i * rows, (i + 1) * rows);
                    self.attention_block(&hi, &wq, &wk, &wv, &wo)
                })
                .collect();
            let att = if per_inst.len() == 1 {
                per_inst.into_iter().next().unwrap()
            } else {
                tape.concat_rows(&per_inst)
            };
            let mut res = h.add(&att);
            if self.cfg.norm != NormKind::None {
                let gamma = params.get(&self.layout, &format!("enc{}.norm1.gamma", l));
                let beta = params.get(&self.layout, &format!("enc{}.norm1.beta", l));
                res = self.normalize(&res, &gamma, &beta, rows);
            }
            let w1 = params.get(&self.layout, &format!("enc{}.ff.w1", l));
            let b1 = params.get(&self.layout, &format!("enc{}.ff.b1", l));
            let w2 = params.get(&self.layout, &format!("enc{}.ff.w2", l));
            let b2 = params.get(&self.layout, &format!("enc{}.ff.b2", l));
            let ff = res.matmul(&w1).add_row_vec(&b1).relu().matmul(&w2).add_row_vec(&b2);
            let mut out = res.add(&ff);
            if self.cfg.norm != NormKind::None {
                let gamma = params.get(&self.layout, &format!("enc{}.norm2.gamma", l));
                let beta = params.get(&self.layout, &format!("enc{}.norm2.beta", l));
                out = self.normalize(&out, &gamma, &beta, rows);
            }
            h = out;
        }

        (0..instances.len())
            .map(|i| {
                let emb = h.slice_rows(i * rows, (i + 1) * rows);
                let graph_ctx = emb.sum_rows().scale(1.0 / rows as f64);
                (emb, graph_ctx)
            })
            .collect()
    }

    /// Precomputes decoder keys/values for one instance's embeddings.
    pub fn decoder_cache(&self, emb: Tensor, graph_ctx: Tensor, params: &ParamTensors) -> DecoderCache {
        let dh = self.cfg.head_dim();
        let wk = params.get(&self.layout, "dec.wk");
        let wv = params.get(&self.layout, "dec.wv");
        let wkl = params.get(&self.layout, "dec.wkl");
        let k = emb.matmul(&wk);
        let v = emb.matmul(&wv);
        let kl = emb.matmul(&wkl);
        let rows = emb.rows();
        let kt_heads = (0..self.cfg.heads).map(|h| k.slice_cols(h * dh, (h + 1) * dh).t()).collect();
        let v_heads = (0..self.cfg.heads).map(|h| v.slice_cols(h * dh, (h + 1) * dh)).collect();
        DecoderCache { emb, graph_ctx, kt_heads, v_heads, klt: kl.t(), rows }
    }

    /// One decode step: masked log-probabilities over actions, one row per
    /// start. Masked actions have probability exactly zero; feasible rows
    /// sum to one.
    pub fn decode_step(
        &self,
        cache: &DecoderCache,
        state: &RolloutState,
        masks: &[Vec<bool>],
        params: &ParamTensors,
    ) -> Tensor {
        let s_count = state.num_starts();
        let tape = cache.emb.tape().clone();
        let dh = self.cfg.head_dim();
        let d = self.cfg.embed_dim;

        let currents: Vec<usize> = state.starts.iter().map(|st| st.current).collect();
        let cur_emb = cache.emb.gather_rows(&currents);
        let graph = cache.graph_ctx.repeat_rows(s_count);
        let context = match self.cfg.problem {
            Problem::Tsp => tape.concat_cols(&[graph, cur_emb]),
            Problem::Cvrp => {
                let caps = Matrix::col_vec(state.starts.iter().map(|st| st.remaining_capacity).collect());
                tape.concat_cols(&[graph, cur_emb, tape.constant(caps)])
            }
        };
        let q = context.matmul(&params.get(&self.layout, "dec.wq"));

        let mask_mat = Matrix::from_fn(s_count, cache.rows, |r, c| if masks[r][c] { 0.0 } else { MASK_NEG });
        let mask_t = tape.constant(mask_mat);

        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for hd in 0..self.cfg.heads {
            let qh = q.slice_cols(hd * dh, (hd + 1) * dh);
            let scores = qh.matmul(&cache.kt_heads[hd]).scale(scale).add(&mask_t);
            let attn = softmax_rows(&scores);
            heads.push(attn.matmul(&cache.v_heads[hd]));
        }
        let glimpse = tape.concat_cols(&heads).matmul(&params.get(&self.layout, "dec.wo"));

        let logits = glimpse
            .matmul(&cache.klt)
            .scale(1.0 / (d as f64).sqrt())
            .tanh()
            .scale(self.cfg.logit_clip)
            .add(&mask_t);
        log_softmax_rows(&logits)
    }

    /// Constructs complete multi-start trajectories for a batch of
    /// same-sized instances, keeping log-probabilities on the tape.
    pub fn rollout_batch(
        &self,
        tape: &Tape,
        instances: &[&VrpInstance],
        params: &ParamTensors,
        mode: RolloutMode,
        num_starts: usize,
        rng: Option<&mut Stream>,
    ) -> Result<TrajectoryBatch> {
        if mode == RolloutMode::Sample && rng.is_none() {
            return Err(Error::invalid_argument("sample mode requires an rng"));
        }
        let mut rng = rng;
        let encoded = self.encode(tape, instances, params);
        let mut per_instance = Vec::with_capacity(instances.len());
        for (inst, (emb, graph_ctx)) in instances.iter().zip(encoded) {
            let cache = self.decoder_cache(emb, graph_ctx, params);
            let mut state = init_multistart(inst, num_starts)?;
            let mut total = tape.constant(Matrix::zeros(num_starts, 1));
            let mut step_log_probs = vec![Vec::new(); num_starts];
            while !state.is_terminal() {
                let masks = feasible_actions(&state, inst)?;
                let logp = self.decode_step(&cache, &state, &masks, params);
                let actions = match mode {
                    RolloutMode::Greedy => choose_greedy(&logp.value()),
                    RolloutMode::Sample => {
                        choose_sampled(&logp.value(), rng.as_mut().expect("rng checked above"))
                    }
                };
                let step_lp = logp.gather_per_row(&actions);
                {
                    let v = step_lp.value();
                    for (s, lps) in step_log_probs.iter_mut().enumerate() {
                        lps.push(v.data[s]);
                    }
                }
                total = total.add(&step_lp);
                apply_action(&mut state, &actions, inst);
            }
            let costs: Vec<f64> = state
                .starts
                .iter()
                .map(|st| {
                    crate::env::solution_cost(&st.order, inst, crate::instances::Rounding::Exact)
                        .expect("rollout produced an infeasible order")
                })
                .collect();
            // Mirror accumulated log-probs into the env state for reporting.
            {
                let v = total.value();
                for (st, lp) in state.starts.iter_mut().zip(&v.data) {
                    st.log_prob = *lp;
                }
            }
            per_instance.push(InstanceTrajectories {
                orders: state.starts.iter().map(|st| st.order.clone()).collect(),
                costs,
                step_log_probs,
                total_log_prob: total,
            });
        }
        Ok(TrajectoryBatch { per_instance, mode, num_starts })
    }

    /// Single-instance wrapper around [`Policy::rollout_batch`].
    pub fn rollout(
        &self,
        tape: &Tape,
        instance: &VrpInstance,
        params: &ParamTensors,
        mode: RolloutMode,
        num_starts: usize,
        rng: Option<&mut Stream>,
    ) -> Result<InstanceTrajectories> {
        let batch = self.rollout_batch(tape, &[instance], params, mode, num_starts, rng)?;
        Ok(batch.per_instance.into_iter().next().unwrap())
    }

    /// Best greedy cost over all starts with a throwaway tape.
    pub fn greedy_cost(&self, instance: &VrpInstance, params: &PolicyParams) -> Result<f64> {
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, params);
        let s = instance.n();
        let traj = self.rollout(&tape, instance, &bound, RolloutMode::Greedy, s, None)?;
        Ok(traj.costs.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    /// Greedy cost of the best dihedral augmentation (min over 8 maps).
    pub fn greedy_cost_augmented(&self, instance: &VrpInstance, params: &PolicyParams) -> Result<f64> {
        let mut best = f64::INFINITY;
        for aug in crate::env::augment8(instance) {
            best = best.min(self.greedy_cost(&aug, params)?);
        }
        Ok(best)
    }
}

fn choose_greedy(logp: &Matrix) -> Vec<usize> {
    (0..logp.rows)
        .map(|r| {
            let row = logp.row(r);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn choose_sampled(logp: &Matrix, rng: &mut Stream) -> Vec<usize> {
    (0..logp.rows)
        .map(|r| {
            let row = logp.row(r);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &lp) in row.iter().enumerate() {
                let p = lp.exp();
                if p <= 0.0 {
                    continue;
                }
                acc += p;
                if u <= acc && chosen.is_none() {
                    chosen = Some(i);
                }
            }
            // Guard against cumulative rounding below 1.
            chosen.unwrap_or_else(|| {
                row.iter()
                    .enumerate()
                    .rev()
                    .find(|(_, &lp)| lp.exp() > 0.0)
                    .map(|(i, _)| i)
                    .expect("no feasible action had positive probability")
            })
        })
        .collect()
}

/// Finite-difference helper for tests: gradient of a scalar function of the
/// flat parameter vector.
pub fn finite_difference(
    params: &PolicyParams,
    h: f64,
    mut f: impl FnMut(&PolicyParams) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; params.len()];
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.values[i] += h;
        let mut minus = params.clone();
        minus.values[i] -= h;
        out[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    out
}

/// Relative L2 distance between two flat vectors.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{instance_from_seed, DistributionSpec, TaskSpec};
    use crate::rng::{stream, StreamTag};
    use crate::tape::grad_values;

    fn rng(seed: u64) -> Stream {
        stream(seed, StreamTag::ParamInit, 0)
    }

    fn tsp_instance(n: usize, seed: u64) -> VrpInstance {
        instance_from_seed(&TaskSpec::new(Problem::Tsp, n, DistributionSpec::Uniform), seed).unwrap()
    }

    fn cvrp_instance(n: usize, seed: u64) -> VrpInstance {
        instance_from_seed(&TaskSpec::new(Problem::Cvrp, n, DistributionSpec::Uniform), seed).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ModelConfig::default_for(Problem::Tsp);
        assert_eq!(cfg.head_dim(), 16);
        let a = init_params(&cfg, &mut rng(3)).unwrap();
        let b = init_params(&cfg, &mut rng(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), a.layout.total);
    }

    #[test]
    fn invalid_head_split_rejected() {
        let mut cfg = ModelConfig::default_for(Problem::Tsp);
        cfg.embed_dim = 63;
        assert!(matches!(init_params(&cfg, &mut rng(1)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn encode_shapes() {
        let policy = Policy::new(ModelConfig::default_for(Problem::Tsp)).unwrap();
        let params = policy.init(&mut rng(1));
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let inst = tsp_instance(10, 1);
        let enc = policy.encode(&tape, &[&inst], &bound);
        assert_eq!(enc[0].0.rows(), 10);
        assert_eq!(enc[0].0.cols(), 64);

        let policy_c = Policy::new(ModelConfig::default_for(Problem::Cvrp)).unwrap();
        let params_c = policy_c.init(&mut rng(1));
        let tape_c = Tape::new();
        let bound_c = ParamTensors::bind_frozen(&tape_c, &params_c);
        let inst_c = cvrp_instance(10, 1);
        let enc_c = policy_c.encode(&tape_c, &[&inst_c], &bound_c);
        assert_eq!(enc_c[0].0.rows(), 11, "depot row included");
        assert_eq!(enc_c[0].0.cols(), 64);
    }

    #[test]
    fn permutation_equivariance_under_instance_norm() {
        let mut cfg = ModelConfig::default_for(Problem::Tsp);
        cfg.norm = NormKind::Instance;
        cfg.layers = 2;
        let policy = Policy::new(cfg).unwrap();
        let params = policy.init(&mut rng(5));
        let inst = tsp_instance(8, 2);

        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let base = policy.encode(&tape, &[&inst], &bound)[0].0.value_clone();

        let perm: Vec<usize> = vec![3, 1, 7, 0, 5, 2, 6, 4];
        let mut permuted = inst.clone();
        permuted.coords = perm.iter().map(|&i| inst.coords[i]).collect();
        let tape2 = Tape::new();
        let bound2 = ParamTensors::bind_frozen(&tape2, &params);
        let out = policy.encode(&tape2, &[&permuted], &bound2)[0].0.value_clone();

        for (new_row, &src) in perm.iter().enumerate() {
            for c in 0..base.cols {
                assert!(
                    (out.at(new_row, c) - base.at(src, c)).abs() < 1e-9,
                    "row {} differs",
                    new_row
                );
            }
        }
    }

    #[test]
    fn instance_norm_is_batch_split_invariant() {
        let mut cfg = ModelConfig::default_for(Problem::Tsp);
        cfg.norm = NormKind::Instance;
        let policy = Policy::new(cfg).unwrap();
        let params = policy.init(&mut rng(9));
        let a = tsp_instance(7, 1);
        let b = tsp_instance(7, 2);

        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let joint = policy.encode(&tape, &[&a, &b], &bound);
        let ja = joint[0].0.value_clone();

        let tape2 = Tape::new();
        let bound2 = ParamTensors::bind_frozen(&tape2, &params);
        let solo = policy.encode(&tape2, &[&a], &bound2)[0].0.value_clone();
        for (x, y) in ja.data.iter().zip(&solo.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_no_track_couples_the_batch() {
        let policy = Policy::new(ModelConfig::default_for(Problem::Tsp)).unwrap();
        let params = policy.init(&mut rng(9));
        let a = tsp_instance(7, 1);
        let b = tsp_instance(7, 2);
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let joint = policy.encode(&tape, &[&a, &b], &bound)[0].0.value_clone();
        let tape2 = Tape::new();
        let bound2 = ParamTensors::bind_frozen(&tape2, &params);
        let solo = policy.encode(&tape2, &[&a], &bound2)[0].0.value_clone();
        let max_diff = joint
            .data
            .iter()
            .zip(&solo.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-9, "batch statistics should depend on the batch");
    }

    #[test]
    fn decode_masks_are_exact() {
        let policy = Policy::new(ModelConfig::tiny(Problem::Tsp)).unwrap();
        let params = policy.init(&mut rng(2));
        let inst = tsp_instance(5, 3);
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let enc = policy.encode(&tape, &[&inst], &bound).remove(0);
        let cache = policy.decoder_cache(enc.0, enc.1, &bound);
        let state = init_multistart(&inst, 3).unwrap();
        let masks = feasible_actions(&state, &inst).unwrap();
        let logp = policy.decode_step(&cache, &state, &masks, &bound);
        let v = logp.value_clone();
        for r in 0..v.rows {
            let mut sum = 0.0;
            for c in 0..v.cols {
                let p = v.at(r, c).exp();
                if !masks[r][c] {
                    assert_eq!(p, 0.0, "masked action must have probability exactly 0");
                }
                sum += p;
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_feasible_action_gets_probability_one() {
        let policy = Policy::new(ModelConfig::tiny(Problem::Tsp)).unwrap();
        let params = policy.init(&mut rng(2));
        let inst = tsp_instance(3, 3);
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let enc = policy.encode(&tape, &[&inst], &bound).remove(0);
        let cache = policy.decoder_cache(enc.0, enc.1, &bound);
        let mut state = init_multistart(&inst, 1).unwrap();
        let second = (state.starts[0].current + 1) % 3;
        apply_action(&mut state, &[second], &inst);
        let masks = feasible_actions(&state, &inst).unwrap();
        assert_eq!(masks[0].iter().filter(|&&m| m).count(), 1);
        let logp = policy.decode_step(&cache, &state, &masks, &bound);
        let the_one = (0..3).find(|&i| masks[0][i]).unwrap();
        assert_eq!(logp.value().at(0, the_one), 0.0, "log 1 must be exactly 0");
    }

    #[test]
    fn greedy_rollout_is_deterministic_and_feasible() {
        let policy = Policy::new(ModelConfig::tiny(Problem::Cvrp)).unwrap();
        let params = policy.init(&mut rng(4));
        let inst = cvrp_instance(6, 5);
        let run = || {
            let tape = Tape::new();
            let bound = ParamTensors::bind_frozen(&tape, &params);
            let t = policy.rollout(&tape, &inst, &bound, RolloutMode::Greedy, 6, None).unwrap();
            (t.orders.clone(), t.costs.clone())
        };
        let (o1, c1) = run();
        let (o2, c2) = run();
        assert_eq!(o1, o2);
        assert_eq!(c1, c2);
        for o in &o1 {
            crate::env::validate_order(o, &inst).unwrap();
        }
    }

    #[test]
    fn total_log_prob_equals_step_sum() {
        let policy = Policy::new(ModelConfig::tiny(Problem::Tsp)).unwrap();
        let params = policy.init(&mut rng(6));
        let inst = tsp_instance(6, 7);
        let tape = Tape::new();
        let bound = ParamTensors::bind_frozen(&tape, &params);
        let mut r = rng(8);
        let t = policy.rollout(&tape, &inst, &bound, RolloutMode::Sample, 4, Some(&mut r)).unwrap();
        let totals = t.total_log_prob.value_clone();
        for s in 0..4 {
            let sum: f64 = t.step_log_probs[s].iter().sum();
            assert!((totals.data[s] - sum).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_log_prob_gradient_matches_finite_differences() {
        // Differentiability contract on a 4-node instance with an 8-dim
        // tiny policy: d/dparams of a fixed trajectory's log-probability.
        let policy = Policy::new(ModelConfig::tiny(Problem::Tsp)).unwrap();
        let params = policy.init(&mut rng(10));
        let inst = tsp_instance(4, 11);

        let fixed_logp = |p: &PolicyParams| -> f64 {
            let tape = Tape::new();
            let bound = ParamTensors::bind_frozen(&tape, p);
            let enc = policy.encode(&tape, &[&inst], &bound).remove(0);
            let cache = policy.decoder_cache(enc.0, enc.1, &bound);
            let mut state = init_multistart(&inst, 1).unwrap();
            let mut total = 0.0;
            for &a in &[2usize, 1, 3] {
                let masks = feasible_actions(&state, &inst).unwrap();
                let logp = policy.decode_step(&cache, &state, &masks, &bound);
                total += logp.value().at(0, a);
                apply_action(&mut state, &[a], &inst);
            }
            total
        };

        // Analytic gradient via the tape.
        let tape = Tape::new();
        let bound = ParamTensors::bind(&tape, &params);
        let enc = policy.encode(&tape, &[&inst], &bound).remove(0);
        let cache = policy.decoder_cache(enc.0, enc.1, &bound);
        let mut state = init_multistart(&inst, 1).unwrap();
        let mut total = tape.constant(Matrix::zeros(1, 1));
        for &a in &[2usize, 1, 3] {
            let masks = feasible_actions(&state, &inst).unwrap();
            let logp = policy.decode_step(&cache, &state, &masks, &bound);
            total = total.add(&logp.gather_per_row(&[a]));
            apply_action(&mut state, &[a], &inst);
        }
        let grads = grad_values(&total, &bound.entries);
        let analytic = flatten(&policy.layout, &grads);
        let fd = finite_difference(&params, 1e-5, fixed_logp);
        let err = rel_l2(&analytic, &fd);
        assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn augmented_greedy_never_worse() {
        let policy = Policy::new(ModelConfig::tiny(Problem::Tsp)).unwrap();
        let params = policy.init(&mut rng(12));
        for seed in 0..10 {
            let inst = tsp_instance(7, 100 + seed);
            let plain = policy.greedy_cost(&inst, &params).unwrap();
            let aug = policy.greedy_cost_augmented(&inst, &params).unwrap();
            assert!(aug <= plain + 1e-9);
        }
    }
}
