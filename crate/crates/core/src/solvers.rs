//! Reference solvers used for hardness gaps and tests: exact Held-Karp for
//! tiny TSPs, improvement-only local search for desk-scale TSP/CVRP, and an
//! adapter that shells out to a user-provided solver binary.

use std::path::PathBuf;
use std::process::Command;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::env::{make_solution, validate_order, Solution};
use crate::error::{Error, Result};
use crate::instances::{tsplib, Point, Problem, Rounding, VrpInstance};
use crate::rng::Stream;

/// Largest size Held-Karp accepts (13 * 2^13 * 13 table work).
pub const HELD_KARP_MAX_N: usize = 13;

/// Default number of full improvement passes for local search.
pub const DEFAULT_LS_BUDGET: usize = 50;

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub solution: Solution,
    pub solver_tag: String,
    /// Improvement passes (or DP table size for exact solves) spent.
    pub effort: usize,
    pub exact: bool,
}

fn leg(instance: &VrpInstance, a: &Point, b: &Point) -> f64 {
    match instance.rounding {
        Rounding::Exact => a.dist(b),
        Rounding::Euc2d => tsplib::euc2d(a, b),
    }
}

fn tsp_matrix(instance: &VrpInstance) -> Vec<Vec<f64>> {
    let n = instance.n();
    (0..n)
        .map(|i| (0..n).map(|j| leg(instance, &instance.coords[i], &instance.coords[j])).collect())
        .collect()
}

/// Provably optimal TSP tour by dynamic programming over subsets.
pub fn held_karp(instance: &VrpInstance) -> Result<SolverResult> {
    if instance.task.problem != Problem::Tsp {
        return Err(Error::UnsupportedFormat("held_karp solves TSP only".into()));
    }
    let n = instance.n();
    if n > HELD_KARP_MAX_N {
        return Err(Error::invalid_argument(format!(
            "held_karp limited to n <= {}, got {}",
            HELD_KARP_MAX_N, n
        )));
    }
    let d = tsp_matrix(instance);
    if n == 2 {
        let order = vec![0, 1];
        return Ok(SolverResult {
            solution: make_solution(order, instance)?,
            solver_tag: "held-karp".into(),
            effort: 1,
            exact: true,
        });
    }

    // g[mask][e]: cheapest path from node 0 through `mask` ending at e.
    // Node 0 is the fixed start and excluded from the mask.
    let m = n - 1; // nodes 1..n encoded as bits 0..m
    let full = 1usize << m;
    let mut g = vec![f64::INFINITY; full * m];
    let mut parent = vec![usize::MAX; full * m];
    for e in 0..m {
        g[(1 << e) * m + e] = d[0][e + 1];
    }
    for mask in 1..full {
        for e in 0..m {
            if mask & (1 << e) == 0 {
                continue;
            }
            let cur = g[mask * m + e];
            if !cur.is_finite() {
                continue;
            }
            let rest = !mask & (full - 1);
            let mut bits = rest;
            while bits != 0 {
                let nxt = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let nmask = mask | (1 << nxt);
                let cand = cur + d[e + 1][nxt + 1];
                if cand < g[nmask * m + nxt] {
                    g[nmask * m + nxt] = cand;
                    parent[nmask * m + nxt] = e;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut best_end = 0;
    for e in 0..m {
        let total = g[(full - 1) * m + e] + d[e + 1][0];
        if total < best {
            best = total;
            best_end = e;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut mask = full - 1;
    let mut e = best_end;
    while e != usize::MAX {
        order.push(e + 1);
        let p = parent[mask * m + e];
        mask &= !(1 << e);
        e = p;
    }
    order.push(0);
    order.reverse();
    Ok(SolverResult {
        solution: make_solution(order, instance)?,
        solver_tag: "held-karp".into(),
        effort: full * m,
        exact: true,
    })
}

fn nearest_neighbor_tour(d: &[Vec<f64>], start: usize) -> Vec<usize> {
    let n = d.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    order.push(cur);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if !visited[j] && d[cur][j] < best_d {
                best_d = d[cur][j];
                best = j;
            }
        }
        visited[best] = true;
        order.push(best);
        cur = best;
    }
    order
}

fn tour_cost(d: &[Vec<f64>], order: &[usize]) -> f64 {
    let mut c = 0.0;
    for w in order.windows(2) {
        c += d[w[0]][w[1]];
    }
    c + d[*order.last().unwrap()][order[0]]
}

/// First-improvement 2-opt pass. Returns true when a move was applied.
fn two_opt_pass(d: &[Vec<f64>], order: &mut [usize]) -> bool {
    let n = order.len();
    let mut improved = false;
    for i in 0..n - 1 {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue; // same edge
            }
            let (a, b) = (order[i], order[i + 1]);
            let (c, e) = (order[j], order[(j + 1) % n]);
            let delta = d[a][c] + d[b][e] - d[a][b] - d[c][e];
            if delta < -1e-12 {
                order[i + 1..=j].reverse();
                improved = true;
            }
        }
    }
    improved
}

/// First-improvement Or-opt pass: relocate segments of length 1..=3.
fn or_opt_pass(d: &[Vec<f64>], order: &mut Vec<usize>) -> bool {
    let n = order.len();
    let mut improved = false;
    for seg_len in 1..=3usize.min(n - 2) {
        let mut i = 0;
        while i + seg_len <= n {
            let prev = order[(i + n - 1) % n];
            let first = order[i];
            let last = order[i + seg_len - 1];
            let next = order[(i + seg_len) % n];
            if prev == last || next == first {
                i += 1;
                continue;
            }
            let removal_gain = d[prev][first] + d[last][next] - d[prev][next];
            if removal_gain <= 1e-12 {
                i += 1;
                continue;
            }
            let mut applied = false;
            let in_seg = |p: usize| p >= i && p < i + seg_len;
            for j in 0..n {
                // insertion between order[j] and order[j+1]; both endpoints
                // must lie outside the segment
                if in_seg(j) || in_seg((j + 1) % n) {
                    continue;
                }
                let u = order[j];
                let v = order[(j + 1) % n];
                let insertion_cost = d[u][first] + d[last][v] - d[u][v];
                if insertion_cost < removal_gain - 1e-12 {
                    let seg: Vec<usize> = order.drain(i..i + seg_len).collect();
                    // positions shift when the segment sat before j
                    let jj = if i < j { j - seg_len } else { j };
                    let insert_at = jj + 1;
                    for (k, node) in seg.into_iter().enumerate() {
                        order.insert(insert_at + k, node);
                    }
                    improved = true;
                    applied = true;
                    break;
                }
            }
            if !applied {
                i += 1;
            }
        }
    }
    improved
}

/// Nearest-neighbor construction followed by 2-opt and Or-opt passes until
/// no improvement or `budget` passes. Deterministic under `rng`'s seed.
pub fn tsp_local_search(instance: &VrpInstance, budget: usize, rng: &mut Stream) -> Result<SolverResult> {
    if instance.task.problem != Problem::Tsp {
        return Err(Error::UnsupportedFormat("tsp_local_search solves TSP only".into()));
    }
    let n = instance.n();
    if n < 4 {
        let order: Vec<usize> = (0..n).collect();
        return Ok(SolverResult {
            solution: make_solution(order, instance)?,
            solver_tag: "nn+2opt+oropt".into(),
            effort: 0,
            exact: true, // every order below 4 nodes is optimal
        });
    }
    let d = tsp_matrix(instance);
    let start = rng.gen_range(0..n);
    let mut order = nearest_neighbor_tour(&d, start);
    let construction_cost = tour_cost(&d, &order);
    let mut passes = 0;
    while passes < budget {
        let mut improved = two_opt_pass(&d, &mut order);
        improved |= or_opt_pass(&d, &mut order);
        passes += 1;
        if !improved {
            break;
        }
    }
    debug_assert!(tour_cost(&d, &order) <= construction_cost + 1e-9);
    Ok(SolverResult {
        solution: make_solution(order, instance)?,
        solver_tag: "nn+2opt+oropt".into(),
        effort: passes,
        exact: false,
    })
}

// ---------------------------------------------------------------------------
// CVRP local search
// ---------------------------------------------------------------------------

struct Routes {
    routes: Vec<Vec<usize>>, // customer ids 1..=n, no depots
    loads: Vec<f64>,
}

impl Routes {
    fn to_order(&self) -> Vec<usize> {
        let mut order = vec![0];
        for r in &self.routes {
            if r.is_empty() {
                continue;
            }
            order.extend_from_slice(r);
            order.push(0);
        }
        order
    }

    fn rebuild_loads(&mut self, instance: &VrpInstance) {
        self.routes.retain(|r| !r.is_empty());
        self.loads = self
            .routes
            .iter()
            .map(|r| r.iter().map(|&c| instance.demand(c - 1)).sum())
            .collect();
    }
}

fn cvrp_dist(instance: &VrpInstance) -> Vec<Vec<f64>> {
    // index 0 = depot, 1..=n customers
    let n = instance.n();
    let pt = |i: usize| -> Point {
        if i == 0 {
            instance.depot.unwrap()
        } else {
            instance.coords[i - 1]
        }
    };
    (0..=n)
        .map(|i| (0..=n).map(|j| leg(instance, &pt(i), &pt(j))).collect())
        .collect()
}

/// Clarke-Wright parallel savings construction under the capacity limit.
fn savings_construction(instance: &VrpInstance, d: &[Vec<f64>]) -> Routes {
    let n = instance.n();
    let mut route_of: Vec<usize> = (0..n).collect(); // customer i+1 -> route idx
    let mut routes: Vec<Vec<usize>> = (1..=n).map(|c| vec![c]).collect();
    let mut loads: Vec<f64> = (0..n).map(|i| instance.demand(i)).collect();

    let mut savings: Vec<(f64, usize, usize)> = Vec::new();
    for i in 1..=n {
        for j in i + 1..=n {
            savings.push((d[0][i] + d[0][j] - d[i][j], i, j));
        }
    }
    savings.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    for (s, i, j) in savings {
        if s <= 0.0 {
            break;
        }
        let (ri, rj) = (route_of[i - 1], route_of[j - 1]);
        if ri == rj || loads[ri] + loads[rj] > 1.0 + 1e-9 {
            continue;
        }
        // merge only when i and j sit at route endpoints
        let i_first = routes[ri].first() == Some(&i);
        let i_last = routes[ri].last() == Some(&i);
        let j_first = routes[rj].first() == Some(&j);
        let j_last = routes[rj].last() == Some(&j);
        let merged: Option<Vec<usize>> = if i_last && j_first {
            let mut v = routes[ri].clone();
            v.extend_from_slice(&routes[rj]);
            Some(v)
        } else if j_last && i_first {
            let mut v = routes[rj].clone();
            v.extend_from_slice(&routes[ri]);
            Some(v)
        } else if i_first && j_first {
            let mut v: Vec<usize> = routes[ri].iter().rev().cloned().collect();
            v.extend_from_slice(&routes[rj]);
            Some(v)
        } else if i_last && j_last {
            let mut v = routes[ri].clone();
            v.extend(routes[rj].iter().rev().cloned());
            Some(v)
        } else {
            None
        };
        if let Some(v) = merged {
            let load = loads[ri] + loads[rj];
            routes[rj].clear();
            loads[rj] = 0.0;
            for &c in &v {
                route_of[c - 1] = ri;
            }
            routes[ri] = v;
            loads[ri] = load;
        }
    }
    let mut out = Routes { routes, loads };
    out.rebuild_loads(instance);
    out
}

fn route_cost(d: &[Vec<f64>], route: &[usize]) -> f64 {
    if route.is_empty() {
        return 0.0;
    }
    let mut c = d[0][route[0]];
    for w in route.windows(2) {
        c += d[w[0]][w[1]];
    }
    c + d[*route.last().unwrap()][0]
}

/// Intra-route 2-opt on every route (open tours anchored at the depot).
fn intra_two_opt(d: &[Vec<f64>], routes: &mut Routes) -> bool {
    let mut improved = false;
    for r in routes.routes.iter_mut() {
        if r.len() < 3 {
            continue;
        }
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..r.len() - 1 {
                for j in i + 1..r.len() {
                    let prev = if i == 0 { 0 } else { r[i - 1] };
                    let next = if j == r.len() - 1 { 0 } else { r[j + 1] };
                    let delta = d[prev][r[j]] + d[r[i]][next] - d[prev][r[i]] - d[r[j]][next];
                    if delta < -1e-12 {
                        r[i..=j].reverse();
                        changed = true;
                        improved = true;
                    }
                }
            }
        }
    }
    improved
}

/// Moves one customer into another route when cost drops and capacity fits.
fn inter_relocate(instance: &VrpInstance, d: &[Vec<f64>], routes: &mut Routes) -> bool {
    let nr = routes.routes.len();
    for src in 0..nr {
        for pos in 0..routes.routes[src].len() {
            let c = routes.routes[src][pos];
            let demand = instance.demand(c - 1);
            let prev = if pos == 0 { 0 } else { routes.routes[src][pos - 1] };
            let next = if pos + 1 == routes.routes[src].len() { 0 } else { routes.routes[src][pos + 1] };
            let removal_gain = d[prev][c] + d[c][next] - d[prev][next];
            for dst in 0..nr {
                if dst == src || routes.loads[dst] + demand > 1.0 + 1e-9 {
                    continue;
                }
                for ins in 0..=routes.routes[dst].len() {
                    let u = if ins == 0 { 0 } else { routes.routes[dst][ins - 1] };
                    let v = if ins == routes.routes[dst].len() { 0 } else { routes.routes[dst][ins] };
                    let insertion = d[u][c] + d[c][v] - d[u][v];
                    if insertion < removal_gain - 1e-12 {
                        routes.routes[src].remove(pos);
                        routes.routes[dst].insert(ins, c);
                        routes.rebuild_loads(instance);
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Swaps two customers between routes when capacity allows and cost drops.
fn inter_exchange(instance: &VrpInstance, d: &[Vec<f64>], routes: &mut Routes) -> bool {
    let nr = routes.routes.len();
    for r1 in 0..nr {
        for r2 in r1 + 1..nr {
            for p1 in 0..routes.routes[r1].len() {
                for p2 in 0..routes.routes[r2].len() {
                    let (a, b) = (routes.routes[r1][p1], routes.routes[r2][p2]);
                    let (da, db) = (instance.demand(a - 1), instance.demand(b - 1));
                    if routes.loads[r1] - da + db > 1.0 + 1e-9
                        || routes.loads[r2] - db + da > 1.0 + 1e-9
                    {
                        continue;
                    }
                    let cost_before =
                        route_cost(d, &routes.routes[r1]) + route_cost(d, &routes.routes[r2]);
                    let mut n1 = routes.routes[r1].clone();
                    let mut n2 = routes.routes[r2].clone();
                    n1[p1] = b;
                    n2[p2] = a;
                    let cost_after = route_cost(d, &n1) + route_cost(d, &n2);
                    if cost_after < cost_before - 1e-12 {
                        routes.routes[r1] = n1;
                        routes.routes[r2] = n2;
                        routes.rebuild_loads(instance);
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Savings construction plus budgeted improvement passes (intra-route
/// 2-opt, inter-route relocate and exchange), improvement-only.
pub fn cvrp_local_search(instance: &VrpInstance, budget: usize, _rng: &mut Stream) -> Result<SolverResult> {
    if instance.task.problem != Problem::Cvrp {
        return Err(Error::UnsupportedFormat("cvrp_local_search solves CVRP only".into()));
    }
    let d = cvrp_dist(instance);
    let mut routes = savings_construction(instance, &d);
    let construction: f64 = routes.routes.iter().map(|r| route_cost(&d, r)).sum();
    let mut passes = 0;
    while passes < budget {
        let mut improved = intra_two_opt(&d, &mut routes);
        improved |= inter_relocate(instance, &d, &mut routes);
        improved |= inter_exchange(instance, &d, &mut routes);
        passes += 1;
        if !improved {
            break;
        }
    }
    let solution = make_solution(routes.to_order(), instance)?;
    debug_assert!(solution.cost <= construction + 1e-9);
    Ok(SolverResult { solution, solver_tag: "savings+ls".into(), effort: passes, exact: false })
}

/// Uses Held-Karp when exact is affordable, local search otherwise.
pub fn solve_reference(instance: &VrpInstance, budget: usize, rng: &mut Stream) -> Result<SolverResult> {
    match instance.task.problem {
        Problem::Tsp if instance.n() <= HELD_KARP_MAX_N => held_karp(instance),
        Problem::Tsp => tsp_local_search(instance, budget, rng),
        Problem::Cvrp => cvrp_local_search(instance, budget, rng),
    }
}

/// Mean of (model - reference) / reference.
pub fn relative_gap(model_costs: &[f64], ref_costs: &[f64]) -> Result<f64> {
    if model_costs.len() != ref_costs.len() {
        return Err(Error::invalid_argument(format!(
            "cost lists differ in length: {} vs {}",
            model_costs.len(),
            ref_costs.len()
        )));
    }
    if model_costs.is_empty() {
        return Err(Error::invalid_argument("empty cost lists"));
    }
    let mut acc = 0.0;
    for (&c, &r) in model_costs.iter().zip(ref_costs) {
        if !(r > 0.0) {
            return Err(Error::invalid_argument(format!("nonpositive reference cost {}", r)));
        }
        acc += (c - r) / r;
    }
    Ok(acc / model_costs.len() as f64)
}

/// Configuration for shelling out to an external solver binary.
///
/// The binary is invoked as `<bin> <input-file> <output-file>`; the output
/// must list one 1-based node index per line, terminated by `-1`.
#[derive(Debug, Clone)]
pub struct ExternalSolverConfig {
    pub binary: PathBuf,
    pub format: ExternalFormat,
    pub tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExternalFormat {
    Tsplib,
    Cvrplib,
}

/// Environment variable that may supply the default solver binary path.
pub const SOLVER_BIN_ENV: &str = "OMNI_SOLVER_BIN";

impl ExternalSolverConfig {
    pub fn from_env(format: ExternalFormat, tag: impl Into<String>) -> Option<Self> {
        std::env::var_os(SOLVER_BIN_ENV).map(|v| ExternalSolverConfig {
            binary: PathBuf::from(v),
            format,
            tag: tag.into(),
        })
    }
}

pub fn external_solver(instance: &VrpInstance, cfg: &ExternalSolverConfig) -> Result<SolverResult> {
    let dir = tempfile::Builder::new().prefix("extsolve").tempdir()?;
    let ext = match cfg.format {
        ExternalFormat::Tsplib => "tsp",
        ExternalFormat::Cvrplib => "vrp",
    };
    let input = dir.path().join(format!("instance.{}", ext));
    let output = dir.path().join("tour.out");
    tsplib::write_tsplib(instance, &input)?;

    let run = Command::new(&cfg.binary).arg(&input).arg(&output).output().map_err(|e| {
        Error::ExternalSolver {
            msg: format!("failed to launch {:?}: {}", cfg.binary, e),
            output: String::new(),
        }
    })?;
    let captured = format!(
        "{}{}",
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    if !run.status.success() {
        return Err(Error::ExternalSolver {
            msg: format!("{:?} exited with {}", cfg.binary, run.status),
            output: captured,
        });
    }
    let tour_text = std::fs::read_to_string(&output).map_err(|e| Error::ExternalSolver {
        msg: format!("no tour file written: {}", e),
        output: captured.clone(),
    })?;
    let mut nodes = Vec::new();
    for line in tour_text.lines() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: i64 = match t.parse() {
            Ok(v) => v,
            Err(_) => continue, // tolerate TOUR_SECTION-style headers
        };
        if v == -1 {
            break;
        }
        if v <= 0 {
            return Err(Error::ExternalSolver {
                msg: format!("bad node index {} in tour file", v),
                output: captured,
            });
        }
        nodes.push(v as usize);
    }
    // File indices are 1-based; CVRP files put the depot at node 1.
    let order: Vec<usize> = match cfg.format {
        ExternalFormat::Tsplib => nodes.iter().map(|&v| v - 1).collect(),
        ExternalFormat::Cvrplib => {
            let inner: Vec<usize> = nodes.iter().map(|&v| v - 1).collect();
            let mut o = Vec::with_capacity(inner.len() + 2);
            if inner.first() != Some(&0) {
                o.push(0);
            }
            o.extend(inner);
            if o.last() != Some(&0) {
                o.push(0);
            }
            o
        }
    };
    validate_order(&order, instance).map_err(|e| Error::ExternalSolver {
        msg: format!("external tour infeasible: {}", e),
        output: captured,
    })?;
    let solution = make_solution(order, instance)?;
    Ok(SolverResult { solution, solver_tag: cfg.tag.clone(), effort: 0, exact: false })
}

/// Seeded subsample without replacement, index-sorted for order-invariance.
pub fn subsample_indices(total: usize, count: usize, rng: &mut Stream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(rng);
    idx.truncate(count.min(total));
    idx.sort_unstable();
    idx
}
