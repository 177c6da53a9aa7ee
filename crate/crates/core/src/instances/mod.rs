//! Synthetic VRP instances: node-coordinate distributions, CVRP demand and
//! capacity scheme, training task sets, and file formats.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub mod io;
pub mod tsplib;

/// A node coordinate in the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Node-coordinate distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    Uniform,
    /// Gaussian mixture with `c` clusters whose centers are uniform on
    /// `[0, l]^2`; remaining points are split as evenly as possible across
    /// clusters and drawn from an isotropic unit Gaussian about each center.
    GaussianMixture { c: usize, l: f64 },
    /// Uniform cloud with a random subset rotated about the origin.
    Rotation,
    /// Uniform cloud with points near a random center pushed outward.
    Explosion,
}

impl DistributionSpec {
    pub fn gm(c: usize, l: f64) -> Self {
        DistributionSpec::GaussianMixture { c, l }
    }

    pub fn validate(&self) -> Result<()> {
        if let DistributionSpec::GaussianMixture { c, l } = self {
            if *c < 1 {
                return Err(Error::invalid_argument("gaussian mixture needs c >= 1"));
            }
            if !(*l > 0.0) {
                return Err(Error::invalid_argument("gaussian mixture needs l > 0"));
            }
        }
        Ok(())
    }

    /// Short display form, e.g. `U`, `GM_2^5`, `R`, `E`.
    pub fn label(&self) -> String {
        match self {
            DistributionSpec::Uniform => "U".into(),
            DistributionSpec::GaussianMixture { c, l } => format!("GM_{}^{}", c, l),
            DistributionSpec::Rotation => "R".into(),
            DistributionSpec::Explosion => "E".into(),
        }
    }

    /// Parses labels accepted by the CLI: `uniform`/`U`, `gm:<c>:<l>`,
    /// `rotation`/`R`, `explosion`/`E`.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        match t.to_ascii_lowercase().as_str() {
            "uniform" | "u" => return Ok(DistributionSpec::Uniform),
            "rotation" | "r" => return Ok(DistributionSpec::Rotation),
            "explosion" | "e" => return Ok(DistributionSpec::Explosion),
            _ => {}
        }
        if let Some(rest) = t.strip_prefix("gm:").or_else(|| t.strip_prefix("GM:")) {
            let mut it = rest.split(':');
            let c = it
                .next()
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| Error::invalid_argument(format!("bad cluster count in '{}'", s)))?;
            let l = it
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::invalid_argument(format!("bad scale in '{}'", s)))?;
            let d = DistributionSpec::gm(c, l);
            d.validate()?;
            return Ok(d);
        }
        Err(Error::invalid_argument(format!("unknown distribution '{}'", s)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Tsp,
    Cvrp,
}

impl Problem {
    pub fn label(&self) -> &'static str {
        match self {
            Problem::Tsp => "tsp",
            Problem::Cvrp => "cvrp",
        }
    }
}

/// A task: every instance of a task shares the size and distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n: usize,
    pub dist: DistributionSpec,
    pub problem: Problem,
}

impl TaskSpec {
    pub fn new(problem: Problem, n: usize, dist: DistributionSpec) -> Self {
        TaskSpec { n, dist, problem }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid_argument("task size must be >= 2"));
        }
        self.dist.validate()
    }

    pub fn label(&self) -> String {
        format!("{}:{}:{}", self.problem.label(), self.n, self.dist.label())
    }
}

/// Which metric a tour cost should use for this instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Plain Euclidean lengths (synthetic data).
    Exact,
    /// Nearest-integer Euclidean legs, the benchmark-file convention.
    Euc2d,
}

/// One routing instance. CVRP instances carry a depot, raw integer demands
/// in 1..=9 and the integer capacity they are normalized by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrpInstance {
    pub task: TaskSpec,
    pub seed: u64,
    pub coords: Vec<Point>,
    pub depot: Option<Point>,
    /// Raw demands (integers); `demand(i)` exposes the normalized view.
    pub demands_raw: Option<Vec<u32>>,
    /// Integer capacity Q; normalized capacity is always 1.
    pub capacity_raw: Option<u32>,
    /// Benchmark files evaluate with EUC_2D integer rounding.
    #[serde(default = "default_rounding")]
    pub rounding: Rounding,
    /// Set for benchmark files whose coordinates are not unit-square.
    #[serde(default)]
    pub name: Option<String>,
}

fn default_rounding() -> Rounding {
    Rounding::Exact
}

impl VrpInstance {
    pub fn n(&self) -> usize {
        self.coords.len()
    }

    /// Normalized demand of customer `i` (0-based customer index).
    pub fn demand(&self, i: usize) -> f64 {
        let q = self.capacity_raw.expect("demand() on a TSP instance") as f64;
        self.demands_raw.as_ref().expect("demand() on a TSP instance")[i] as f64 / q
    }

    pub fn is_cvrp(&self) -> bool {
        self.task.problem == Problem::Cvrp
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.task.n {
            return Err(Error::validation(format!(
                "instance has {} coords but task size {}",
                self.coords.len(),
                self.task.n
            )));
        }
        match self.task.problem {
            Problem::Tsp => {
                if self.depot.is_some() || self.demands_raw.is_some() || self.capacity_raw.is_some() {
                    return Err(Error::validation("tsp instance must not carry depot/demands"));
                }
            }
            Problem::Cvrp => {
                let demands = self
                    .demands_raw
                    .as_ref()
                    .ok_or_else(|| Error::validation("cvrp instance missing demands"))?;
                if self.depot.is_none() {
                    return Err(Error::validation("cvrp instance missing depot"));
                }
                let q = self
                    .capacity_raw
                    .ok_or_else(|| Error::validation("cvrp instance missing capacity"))?;
                if demands.len() != self.coords.len() {
                    return Err(Error::validation("demand count != customer count"));
                }
                for (i, &d) in demands.iter().enumerate() {
                    if d == 0 || d > q {
                        return Err(Error::validation(format!(
                            "demand {} of customer {} outside (0, Q={}]",
                            d, i, q
                        )));
                    }
                    // Synthetic instances must keep the discrete 1..=9 scheme.
                    if self.rounding == Rounding::Exact && d > 9 {
                        return Err(Error::validation(format!(
                            "synthetic demand {} of customer {} outside 1..=9",
                            d, i
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Coordinates min-max scaled to the unit square for model input
    /// (benchmark files keep raw units otherwise). Synthetic instances are
    /// already normalized and come back unchanged structurally.
    pub fn normalized_for_model(&self) -> VrpInstance {
        let mut all: Vec<Point> = self.coords.clone();
        if let Some(d) = self.depot {
            all.push(d);
        }
        let normed = min_max_normalize(&all);
        let mut out = self.clone();
        if let Some(_) = self.depot {
            out.depot = Some(*normed.last().unwrap());
            out.coords = normed[..normed.len() - 1].to_vec();
        } else {
            out.coords = normed;
        }
        out.rounding = Rounding::Exact;
        out
    }
}

/// Vehicle capacity for a synthetic CVRP of size n.
pub fn cvrp_capacity(n: usize) -> u32 {
    (30.0 + n as f64 / 5.0).ceil() as u32
}

/// Min-max normalizes each axis into [0, 1]. A degenerate axis (all points
/// equal) maps to 0.5.
pub fn min_max_normalize(points: &[Point]) -> Vec<Point> {
    if points.is_empty() {
        return Vec::new();
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let scale = |v: f64, lo: f64, hi: f64| {
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.5
        }
    };
    points
        .iter()
        .map(|p| Point::new(scale(p.x, min_x, max_x), scale(p.y, min_y, max_y)))
        .collect()
}

/// Samples `n` points from `dist`. All outputs lie in the unit square.
pub fn sample_coords(n: usize, dist: &DistributionSpec, rng: &mut Stream) -> Result<Vec<Point>> {
    if n < 2 {
        return Err(Error::invalid_argument("need at least 2 nodes"));
    }
    dist.validate()?;
    match dist {
        DistributionSpec::Uniform => Ok(uniform_points(n, rng)),
        DistributionSpec::GaussianMixture { c, l } => {
            if *c > n {
                return Err(Error::invalid_argument(format!(
                    "gaussian mixture with c={} > n={}",
                    c, n
                )));
            }
            Ok(min_max_normalize(&gaussian_mixture_points(n, *c, *l, rng)))
        }
        DistributionSpec::Rotation => {
            let mut pts = uniform_points(n, rng);
            rotation_mutate(&mut pts, rng);
            Ok(min_max_normalize(&pts))
        }
        DistributionSpec::Explosion => {
            let mut pts = uniform_points(n, rng);
            let info = explosion_mutate(&mut pts, rng);
            if info.moved.is_empty() {
                // Nothing inside the blast radius: identity mutation.
                return Ok(pts);
            }
            let inside = pts
                .iter()
                .all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
            if inside {
                Ok(pts)
            } else {
                Ok(min_max_normalize(&pts))
            }
        }
    }
}

fn uniform_points(n: usize, rng: &mut Stream) -> Vec<Point> {
    (0..n).map(|_| Point::new(rng.gen::<f64>(), rng.gen::<f64>())).collect()
}

/// Standard normal via Box-Muller; two uniforms per draw keeps the stream
/// layout platform-independent.
fn randn(rng: &mut Stream) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Centers are nodes themselves; the remaining n-c points are split as
/// evenly as possible (remainders to the lowest-indexed clusters).
fn gaussian_mixture_points(n: usize, c: usize, l: f64, rng: &mut Stream) -> Vec<Point> {
    let centers: Vec<Point> = (0..c)
        .map(|_| Point::new(rng.gen::<f64>() * l, rng.gen::<f64>() * l))
        .collect();
    let rest = n - c;
    let base = rest / c;
    let extra = rest % c;
    let mut pts = centers.clone();
    for (ci, center) in centers.iter().enumerate() {
        let count = base + usize::from(ci < extra);
        for _ in 0..count {
            pts.push(Point::new(center.x + randn(rng), center.y + randn(rng)));
        }
    }
    pts
}

/// Each node joins the rotated subset independently with probability 1/2;
/// the subset is rotated about the origin by a shared random angle.
pub(crate) fn rotation_mutate(points: &mut [Point], rng: &mut Stream) -> (f64, Vec<usize>) {
    let selected: Vec<usize> = (0..points.len()).filter(|_| rng.gen_bool(0.5)).collect();
    let phi: f64 = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
    let (sin, cos) = phi.sin_cos();
    for &i in &selected {
        let p = points[i];
        points[i] = Point::new(cos * p.x + sin * p.y, -sin * p.x + cos * p.y);
    }
    (phi, selected)
}

#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct ExplosionInfo {
    pub center: Point,
    pub moved: Vec<usize>,
}

pub(crate) const EXPLOSION_RADIUS: f64 = 0.3;
const EXPLOSION_RATE: f64 = 10.0; // Exp(lambda = 1/10): mean displacement 0.1

/// Moves every node within `EXPLOSION_RADIUS` of a random center to
/// `v_c + (R + s) * (v_c - v_i) / |v_c - v_i|` with `s ~ Exp(1/10)`.
pub(crate) fn explosion_mutate(points: &mut [Point], rng: &mut Stream) -> ExplosionInfo {
    let center = Point::new(rng.gen(), rng.gen());
    let mut moved = Vec::new();
    for (i, p) in points.iter_mut().enumerate() {
        let d = center.dist(p);
        if d < EXPLOSION_RADIUS {
            let s = -rng.gen::<f64>().max(f64::MIN_POSITIVE).ln() / EXPLOSION_RATE;
            let (dx, dy) = if d > 1e-12 {
                ((center.x - p.x) / d, (center.y - p.y) / d)
            } else {
                (1.0, 0.0)
            };
            let r = EXPLOSION_RADIUS + s;
            *p = Point::new(center.x + r * dx, center.y + r * dy);
            moved.push(i);
        }
    }
    ExplosionInfo { center, moved }
}

/// Builds a full instance for `task`: coordinates from the task
/// distribution, plus depot/demands/capacity for CVRP.
pub fn make_instance(task: &TaskSpec, seed: u64, rng: &mut Stream) -> Result<VrpInstance> {
    task.validate()?;
    let coords = sample_coords(task.n, &task.dist, rng)?;
    let (depot, demands_raw, capacity_raw) = match task.problem {
        Problem::Tsp => (None, None, None),
        Problem::Cvrp => {
            let depot = Point::new(rng.gen(), rng.gen());
            let demands: Vec<u32> = (0..task.n).map(|_| rng.gen_range(1..=9u32)).collect();
            (Some(depot), Some(demands), Some(cvrp_capacity(task.n)))
        }
    };
    Ok(VrpInstance {
        task: *task,
        seed,
        coords,
        depot,
        demands_raw,
        capacity_raw,
        rounding: Rounding::Exact,
        name: None,
    })
}

/// Convenience: deterministic instance from (task, seed).
pub fn instance_from_seed(task: &TaskSpec, seed: u64) -> Result<VrpInstance> {
    let mut rng = crate::rng::stream(seed, crate::rng::StreamTag::Generate, 0);
    make_instance(task, seed, &mut rng)
}

/// The 11 training distributions: uniform, GM_1^1, and c x l for
/// c in {3,5,7}, l in {10,30,50}.
pub fn training_distributions() -> Vec<DistributionSpec> {
    let mut dists = vec![DistributionSpec::Uniform, DistributionSpec::gm(1, 1.0)];
    for c in [3usize, 5, 7] {
        for l in [10.0f64, 30.0, 50.0] {
            dists.push(DistributionSpec::gm(c, l));
        }
    }
    dists
}

/// Cartesian product of sizes {n_min, n_min+step, ..., n_max} and `dists`,
/// size-major, deterministic order.
pub fn build_training_task_set(
    problem: Problem,
    n_min: usize,
    n_max: usize,
    step: usize,
    dists: &[DistributionSpec],
) -> Result<Vec<TaskSpec>> {
    if n_min > n_max {
        return Err(Error::invalid_argument("n_min > n_max"));
    }
    if step == 0 {
        return Err(Error::invalid_argument("step must be >= 1"));
    }
    if dists.is_empty() {
        return Err(Error::invalid_argument("empty distribution list"));
    }
    for d in dists {
        d.validate()?;
    }
    let mut tasks = Vec::new();
    let mut n = n_min;
    loop {
        for d in dists {
            tasks.push(TaskSpec::new(problem, n, *d));
        }
        if n + step > n_max {
            break;
        }
        n += step;
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamTag};

    fn rng(seed: u64) -> Stream {
        stream(seed, StreamTag::Generate, 0)
    }

    #[test]
    fn uniform_points_in_unit_square() {
        let pts = sample_coords(3, &DistributionSpec::Uniform, &mut rng(7)).unwrap();
        assert_eq!(pts.len(), 3);
        for p in pts {
            assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
        }
    }

    #[test]
    fn gm_normalization_attains_endpoints() {
        let pts = sample_coords(100, &DistributionSpec::gm(1, 1.0), &mut rng(3)).unwrap();
        let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
        let minmax = |v: &[f64]| {
            (v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        };
        let (xmin, xmax) = minmax(&xs);
        let (ymin, ymax) = minmax(&ys);
        assert_eq!(xmin, 0.0);
        assert_eq!(xmax, 1.0);
        assert_eq!(ymin, 0.0);
        assert_eq!(ymax, 1.0);
    }

    #[test]
    fn gm_cluster_sizing_handles_remainders() {
        // n=10, c=3: 7 non-center points -> sizes 3,2,2 (+ the 3 centers).
        let pts = gaussian_mixture_points(10, 3, 5.0, &mut rng(5));
        assert_eq!(pts.len(), 10);
    }

    #[test]
    fn gm_rejects_more_clusters_than_nodes() {
        let err = sample_coords(4, &DistributionSpec::gm(5, 1.0), &mut rng(1));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn too_few_nodes_rejected() {
        assert!(matches!(
            sample_coords(1, &DistributionSpec::Uniform, &mut rng(1)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn explosion_moved_points_leave_radius() {
        // Replays the mutation with the same seed and measures distances
        // before any normalization.
        let mut r = rng(11);
        let mut pts = uniform_points(50, &mut r);
        let info = explosion_mutate(&mut pts, &mut r);
        assert!(!info.moved.is_empty(), "seed should place nodes inside the radius");
        for &i in &info.moved {
            assert!(info.center.dist(&pts[i]) >= EXPLOSION_RADIUS - 1e-12);
        }
        // And the public generator stays in the unit square on the same seed.
        let normed = sample_coords(50, &DistributionSpec::Explosion, &mut rng(11)).unwrap();
        for p in normed {
            assert!((-1e-12..=1.0 + 1e-12).contains(&p.x) && (-1e-12..=1.0 + 1e-12).contains(&p.y));
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances_in_subset() {
        let mut r = rng(13);
        let mut pts = uniform_points(40, &mut r);
        let before = pts.clone();
        let (_phi, selected) = rotation_mutate(&mut pts, &mut r);
        for (ai, &a) in selected.iter().enumerate() {
            for &b in &selected[ai + 1..] {
                let d0 = before[a].dist(&before[b]);
                let d1 = pts[a].dist(&pts[b]);
                assert!((d0 - d1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let task = TaskSpec::new(Problem::Cvrp, 17, DistributionSpec::gm(2, 5.0));
        let a = instance_from_seed(&task, 99).unwrap();
        let b = instance_from_seed(&task, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cvrp_capacity_formula() {
        assert_eq!(cvrp_capacity(50), 40);
        assert_eq!(cvrp_capacity(100), 50);
        assert_eq!(cvrp_capacity(13), 33);
    }

    #[test]
    fn cvrp_demands_follow_scheme() {
        let task = TaskSpec::new(Problem::Cvrp, 50, DistributionSpec::Uniform);
        let inst = instance_from_seed(&task, 4).unwrap();
        assert_eq!(inst.capacity_raw, Some(40));
        for i in 0..50 {
            let d = inst.demand(i);
            let k = (d * 40.0).round();
            assert!((d * 40.0 - k).abs() < 1e-12, "demand not an exact multiple of 1/Q");
            assert!((1.0..=9.0).contains(&k));
        }
        inst.validate().unwrap();
    }

    #[test]
    fn tsp_has_no_depot_or_demands() {
        let task = TaskSpec::new(Problem::Tsp, 10, DistributionSpec::Uniform);
        let inst = instance_from_seed(&task, 1).unwrap();
        assert!(inst.depot.is_none() && inst.demands_raw.is_none());
        inst.validate().unwrap();
    }

    #[test]
    fn task_set_counts() {
        let dists = training_distributions();
        assert_eq!(dists.len(), 11);
        let tasks = build_training_task_set(Problem::Tsp, 50, 200, 5, &dists).unwrap();
        assert_eq!(tasks.len(), 341);

        let single = build_training_task_set(Problem::Tsp, 10, 10, 5, &[DistributionSpec::Uniform]).unwrap();
        assert_eq!(single.len(), 1);

        let six = build_training_task_set(
            Problem::Tsp,
            10,
            20,
            5,
            &[DistributionSpec::Uniform, DistributionSpec::gm(2, 5.0)],
        )
        .unwrap();
        assert_eq!(six.len(), 6);

        assert!(build_training_task_set(Problem::Tsp, 10, 20, 5, &[]).is_err());
    }

    #[test]
    fn degenerate_min_max_maps_to_half() {
        let pts = vec![Point::new(0.4, 0.2), Point::new(0.4, 0.8)];
        let normed = min_max_normalize(&pts);
        assert_eq!(normed[0].x, 0.5);
        assert_eq!(normed[1].x, 0.5);
        assert_eq!(normed[0].y, 0.0);
        assert_eq!(normed[1].y, 1.0);
    }
}
