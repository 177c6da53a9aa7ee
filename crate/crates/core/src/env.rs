//! The construction MDP for TSP and CVRP: multi-start rollout state,
//! feasibility masks, step dynamics, tour costs, solution validation and the
//! x8 dihedral augmentation.
//!
//! Action indexing: TSP actions are node indices `0..n`. CVRP actions are
//! `0` for the depot and `1..=n` for customers (customer `a` maps to
//! `coords[a-1]` / `demands[a-1]`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{tsplib::euc2d, Point, Problem, Rounding, VrpInstance};

/// A complete feasible tour with its cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub order: Vec<usize>,
    pub problem: Problem,
    pub cost: f64,
}

/// Capacity comparisons tolerate accumulated float error from summing exact
/// multiples of 1/Q.
const CAP_EPS: f64 = 1e-9;

/// One trajectory of a multi-start rollout.
#[derive(Debug, Clone)]
pub struct StartState {
    pub current: usize,
    pub visited: Vec<bool>,
    pub remaining_capacity: f64,
    pub order: Vec<usize>,
    pub log_prob: f64,
    /// CVRP only: the first customer this start must visit.
    pub forced_first: Option<usize>,
}

/// Rollout state over `S` parallel starts of one instance.
#[derive(Debug, Clone)]
pub struct RolloutState {
    pub starts: Vec<StartState>,
    pub step: usize,
    pub problem: Problem,
}

impl RolloutState {
    pub fn num_starts(&self) -> usize {
        self.starts.len()
    }

    pub fn is_terminal(&self) -> bool {
        match self.problem {
            Problem::Tsp => self.starts.iter().all(|s| s.visited.iter().all(|&v| v)),
            Problem::Cvrp => self
                .starts
                .iter()
                .all(|s| s.current == 0 && s.visited.iter().skip(1).all(|&v| v)),
        }
    }
}

/// Sets up `S` parallel trajectories. TSP: trajectory `s` starts at node
/// `s`. CVRP: every trajectory starts at the depot with customer `s+1`
/// forced as its first visit.
pub fn init_multistart(instance: &VrpInstance, s_count: usize) -> Result<RolloutState> {
    let n = instance.n();
    if s_count < 1 || s_count > n {
        return Err(Error::invalid_argument(format!(
            "start count {} outside 1..={}",
            s_count, n
        )));
    }
    let starts = match instance.task.problem {
        Problem::Tsp => (0..s_count)
            .map(|s| {
                let mut visited = vec![false; n];
                visited[s] = true;
                StartState {
                    current: s,
                    visited,
                    remaining_capacity: 1.0,
                    order: vec![s],
                    log_prob: 0.0,
                    forced_first: None,
                }
            })
            .collect(),
        Problem::Cvrp => (0..s_count)
            .map(|s| {
                let mut visited = vec![false; n + 1];
                visited[0] = true;
                StartState {
                    current: 0,
                    visited,
                    remaining_capacity: 1.0,
                    order: vec![0],
                    log_prob: 0.0,
                    forced_first: Some(s + 1),
                }
            })
            .collect(),
    };
    Ok(RolloutState { starts, step: 0, problem: instance.task.problem })
}

/// A one-trajectory state beginning at `start` (TSP node index, or forced
/// first customer for CVRP). Used by enumeration oracles.
pub fn init_single_start(instance: &VrpInstance, start: usize) -> Result<RolloutState> {
    let mut st = init_multistart(instance, start + 1)?;
    st.starts = vec![st.starts.pop().unwrap()];
    Ok(st)
}

/// Feasible-action mask per start. TSP: unvisited nodes. CVRP: unvisited
/// customers whose demand fits the remaining capacity, plus the depot
/// whenever the vehicle is not already there (no depot self-loops).
pub fn feasible_actions(state: &RolloutState, instance: &VrpInstance) -> Result<Vec<Vec<bool>>> {
    if state.is_terminal() {
        return Err(Error::invalid_state("feasible_actions on a terminal rollout"));
    }
    let n = instance.n();
    let masks = state
        .starts
        .iter()
        .map(|st| match state.problem {
            Problem::Tsp => st.visited.iter().map(|&v| !v).collect(),
            Problem::Cvrp => {
                if let Some(f) = st.forced_first {
                    let mut m = vec![false; n + 1];
                    m[f] = true;
                    return m;
                }
                let mut m = vec![false; n + 1];
                for a in 1..=n {
                    if !st.visited[a] && instance.demand(a - 1) <= st.remaining_capacity + CAP_EPS {
                        m[a] = true;
                    }
                }
                // Depot return allowed anywhere except from the depot itself;
                // at the depot the capacity reset makes every unvisited
                // customer feasible, so a move always exists.
                m[0] = st.current != 0;
                m
            }
        })
        .collect::<Vec<_>>();
    for (s, m) in masks.iter().enumerate() {
        debug_assert!(m.iter().any(|&b| b), "start {} has no feasible action", s);
    }
    Ok(masks)
}

/// Applies one action per start. Infeasible actions are a programming
/// error and panic.
pub fn apply_action(state: &mut RolloutState, actions: &[usize], instance: &VrpInstance) {
    assert_eq!(actions.len(), state.starts.len(), "one action per start");
    let masks = feasible_actions(state, instance).expect("apply_action on terminal state");
    for (st, (&a, mask)) in state.starts.iter_mut().zip(actions.iter().zip(&masks)) {
        assert!(mask[a], "infeasible action {} (mask {:?})", a, mask);
        match state.problem {
            Problem::Tsp => {
                st.visited[a] = true;
            }
            Problem::Cvrp => {
                if a == 0 {
                    st.remaining_capacity = 1.0;
                } else {
                    st.visited[a] = true;
                    st.remaining_capacity -= instance.demand(a - 1);
                    st.forced_first = None;
                }
            }
        }
        st.current = a;
        st.order.push(a);
    }
    state.step += 1;
}

/// Node position lookup honoring the CVRP depot-as-zero convention.
fn node_point(instance: &VrpInstance, idx: usize) -> Point {
    match instance.task.problem {
        Problem::Tsp => instance.coords[idx],
        Problem::Cvrp => {
            if idx == 0 {
                instance.depot.expect("cvrp instance without depot")
            } else {
                instance.coords[idx - 1]
            }
        }
    }
}

fn leg(instance: &VrpInstance, a: usize, b: usize, rounding: Rounding) -> f64 {
    let (pa, pb) = (node_point(instance, a), node_point(instance, b));
    match rounding {
        Rounding::Exact => pa.dist(&pb),
        Rounding::Euc2d => euc2d(&pa, &pb),
    }
}

/// Checks feasibility of `order` for `instance`.
pub fn validate_order(order: &[usize], instance: &VrpInstance) -> Result<()> {
    let n = instance.n();
    match instance.task.problem {
        Problem::Tsp => {
            if order.len() != n {
                return Err(Error::validation(format!("tsp order length {} != {}", order.len(), n)));
            }
            let mut seen = vec![false; n];
            for &v in order {
                if v >= n || seen[v] {
                    return Err(Error::validation(format!("tsp order is not a permutation (node {})", v)));
                }
                seen[v] = true;
            }
        }
        Problem::Cvrp => {
            if order.len() < 3 || order[0] != 0 || *order.last().unwrap() != 0 {
                return Err(Error::validation("cvrp order must start and end at the depot"));
            }
            let mut seen = vec![false; n + 1];
            let mut load = 0.0;
            let mut prev_depot = true;
            for &v in &order[1..] {
                if v == 0 {
                    if prev_depot {
                        return Err(Error::validation("empty route (depot follows depot)"));
                    }
                    load = 0.0;
                    prev_depot = true;
                } else {
                    if v > n || seen[v] {
                        return Err(Error::validation(format!("customer {} repeated or out of range", v)));
                    }
                    seen[v] = true;
                    load += instance.demand(v - 1);
                    if load > 1.0 + CAP_EPS {
                        return Err(Error::validation(format!("route exceeds capacity ({:.6})", load)));
                    }
                    prev_depot = false;
                }
            }
            if let Some(missing) = (1..=n).find(|&c| !seen[c]) {
                return Err(Error::validation(format!("customer {} never visited", missing)));
            }
        }
    }
    Ok(())
}

/// Total tour length of a complete feasible order, including the closing
/// leg back to the start (TSP) / between depot visits (CVRP).
pub fn solution_cost(order: &[usize], instance: &VrpInstance, rounding: Rounding) -> Result<f64> {
    validate_order(order, instance)?;
    let mut cost = 0.0;
    for w in order.windows(2) {
        cost += leg(instance, w[0], w[1], rounding);
    }
    if instance.task.problem == Problem::Tsp {
        cost += leg(instance, *order.last().unwrap(), order[0], rounding);
    }
    Ok(cost)
}

/// Builds a validated [`Solution`] using the instance's native rounding.
pub fn make_solution(order: Vec<usize>, instance: &VrpInstance) -> Result<Solution> {
    let cost = solution_cost(&order, instance, instance.rounding)?;
    Ok(Solution { order, problem: instance.task.problem, cost })
}

/// The eight dihedral symmetries of the unit square, identity first.
pub const DIHEDRAL_MAPS: [fn(Point) -> Point; 8] = [
    |p| Point::new(p.x, p.y),
    |p| Point::new(p.y, p.x),
    |p| Point::new(p.x, 1.0 - p.y),
    |p| Point::new(p.y, 1.0 - p.x),
    |p| Point::new(1.0 - p.x, p.y),
    |p| Point::new(1.0 - p.y, p.x),
    |p| Point::new(1.0 - p.x, 1.0 - p.y),
    |p| Point::new(1.0 - p.y, 1.0 - p.x),
];

/// Applies all eight unit-square symmetries to coordinates (and depot).
pub fn augment8(instance: &VrpInstance) -> Vec<VrpInstance> {
    DIHEDRAL_MAPS
        .iter()
        .map(|f| {
            let mut v = instance.clone();
            v.coords = instance.coords.iter().map(|&p| f(p)).collect();
            v.depot = instance.depot.map(f);
            v
        })
        .collect()
}

/// Solution text export: `cost <value>` then `order <indices>`.
pub fn solution_to_text(sol: &Solution) -> String {
    let order = sol.order.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
    format!("cost {}\norder {}\n", sol.cost, order)
}

pub fn solution_from_text(text: &str, instance: &VrpInstance) -> Result<Solution> {
    let mut cost = None;
    let mut order = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("cost ") {
            cost = Some(rest.parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                msg: "bad cost value".into(),
            })?);
        } else if let Some(rest) = line.strip_prefix("order ") {
            let parsed: std::result::Result<Vec<usize>, _> =
                rest.split_whitespace().map(|t| t.parse::<usize>()).collect();
            order = Some(parsed.map_err(|_| Error::Parse { line: i + 1, msg: "bad order index".into() })?);
        }
    }
    let order = order.ok_or_else(|| Error::Parse { line: 1, msg: "missing order line".into() })?;
    let sol = make_solution(order, instance)?;
    if let Some(c) = cost {
        if (c - sol.cost).abs() > 1e-6 * (1.0 + sol.cost.abs()) {
            return Err(Error::validation(format!(
                "declared cost {} does not match recomputed {}",
                c, sol.cost
            )));
        }
    }
    Ok(sol)
}
