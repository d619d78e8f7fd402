//! Training-corpus generation: probabilistic roadmaps over Gaussian states.
//!
//! A roadmap node is a full `GaussianState` (position and shape); edges are
//! straight lines in the 5-vector parameterization, kept only when every
//! interpolant stays under the collision risk bound. Shortest paths are
//! resampled to a fixed node count and written to a dataset file together
//! with the scene and the context features the denoiser conditions on.

mod file;

pub use file::{
    build_dataset, read_dataset, subsample_indices, subsample_trajectory, to_train_samples,
    validate_dataset, write_dataset, BuildReport, DatagenParams, DatasetHeader, DatasetRecord,
    ValidationReport, DATASET_NODES,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::costs::cvar_collision;
use crate::costs::GaussianTrajectory;
use crate::error::{Error, Result};
use crate::gaussian::{wasserstein2, GaussianState};
use crate::geom::{EsdfGrid, Point, Workspace};
use crate::rng::{stream_rng, Stream};

/// Sampling box for node shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SigmaBounds {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho_max: f64,
}

impl Default for SigmaBounds {
    fn default() -> Self {
        Self { sigma_min: 0.8, sigma_max: 2.5, rho_max: 0.6 }
    }
}

impl SigmaBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_min must be positive, got {}",
                self.sigma_min
            )));
        }
        if !(self.sigma_max >= self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_max must be at least sigma_min, got {} < {}",
                self.sigma_max, self.sigma_min
            )));
        }
        if !(0.0..1.0).contains(&self.rho_max) {
            return Err(Error::InvalidParameter(format!(
                "rho_max must lie in [0, 1), got {}",
                self.rho_max
            )));
        }
        Ok(())
    }
}

/// Roadmap construction parameters. Risk checks during planning run against
/// `epsilon - risk_margin`; the margin absorbs resampling and interpolation
/// slack so rechecks at the full `epsilon` always pass.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RoadmapParams {
    pub n_nodes: usize,
    pub k_neighbors: usize,
    pub bounds: SigmaBounds,
    /// Tail mass of the collision risk measure.
    pub alpha: f64,
    /// Risk bound the final trajectories must satisfy.
    pub epsilon: f64,
    /// Planning-time tightening of the risk bound, same units as epsilon.
    pub risk_margin: f64,
    /// Target spacing of feasibility checks along an edge, meters of W2 length.
    pub check_spacing: f64,
    /// Rejection attempts allowed per sampled node.
    pub sample_budget: usize,
    /// Duration assigned to the resampled trajectory, seconds.
    pub duration: f64,
}

impl Default for RoadmapParams {
    fn default() -> Self {
        Self {
            n_nodes: 500,
            k_neighbors: 10,
            bounds: SigmaBounds::default(),
            alpha: 0.1,
            epsilon: 0.5,
            risk_margin: 0.2,
            check_spacing: 0.25,
            sample_budget: 20_000,
            duration: 20.0,
        }
    }
}

impl RoadmapParams {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let mut problems = Vec::new();
        if self.n_nodes == 0 {
            problems.push("n_nodes must be positive".to_string());
        }
        if self.k_neighbors == 0 {
            problems.push("k_neighbors must be positive".to_string());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            problems.push(format!("alpha must lie strictly in (0, 1), got {}", self.alpha));
        }
        if !self.epsilon.is_finite() {
            problems.push(format!("epsilon must be finite, got {}", self.epsilon));
        }
        if !(self.risk_margin >= 0.0 && self.risk_margin.is_finite()) {
            problems.push(format!("risk_margin must be nonnegative, got {}", self.risk_margin));
        }
        if !(self.check_spacing > 0.0 && self.check_spacing.is_finite()) {
            problems.push(format!("check_spacing must be positive, got {}", self.check_spacing));
        }
        if self.sample_budget == 0 {
            problems.push("sample_budget must be positive".to_string());
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            problems.push(format!("duration must be positive, got {}", self.duration));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }

    /// Risk bound applied while building the roadmap.
    pub fn planning_epsilon(&self) -> f64 {
        self.epsilon - self.risk_margin
    }
}

/// Independent seeds for the three random choices one dataset attempt makes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DatagenStreams {
    pub attempt: u64,
    pub scene_seed: u64,
    pub endpoint_seed: u64,
    pub plan_seed: u64,
}

impl DatagenStreams {
    pub fn for_attempt(root: u64, attempt: u64) -> Self {
        Self {
            attempt,
            scene_seed: crate::rng::derive_seed(root, Stream::Scenario, attempt),
            endpoint_seed: crate::rng::derive_seed(root, Stream::NodeSampling, attempt),
            plan_seed: crate::rng::derive_seed(root, Stream::DatasetRecord, attempt),
        }
    }
}

/// k-nearest roadmap over Gaussian states. Node 0 is the start, node 1 the
/// goal; edge costs are the exact W2 distance between their endpoints.
#[derive(Debug, Clone)]
pub struct GaussianRoadmap {
    pub nodes: Vec<GaussianState>,
    pub edges: Vec<(usize, usize, f64)>,
    pub start: usize,
    pub goal: usize,
}

/// Linear interpolation of the 5-vector parameterization.
pub fn lerp_state(a: &GaussianState, b: &GaussianState, t: f64) -> GaussianState {
    let av = a.to_array();
    let bv = b.to_array();
    let mut out = [0.0; 5];
    for k in 0..5 {
        out[k] = av[k] + (bv[k] - av[k]) * t;
    }
    GaussianState::from_array(out)
}

/// Number of interpolants needed to check an edge of the given W2 length at
/// the requested spacing. At least 3, capped to keep degenerate inputs cheap.
pub fn edge_resolution(w2_length: f64, check_spacing: f64) -> usize {
    let steps = (w2_length / check_spacing).ceil();
    ((steps as usize).saturating_add(1)).clamp(3, 4096)
}

/// Draws one risk-feasible node: mean uniform over free space, shape uniform
/// within `bounds`, rejecting draws whose collision risk exceeds `epsilon`.
pub fn sample_gaussian_node(
    ws: &Workspace,
    grid: &EsdfGrid,
    bounds: &SigmaBounds,
    alpha: f64,
    epsilon: f64,
    budget: usize,
    seed: u64,
) -> Result<GaussianState> {
    let mut rng = stream_rng(seed, Stream::NodeSampling, 0);
    sample_node_with(&mut rng, ws, grid, bounds, alpha, epsilon, budget)
}

fn sample_node_with(
    rng: &mut ChaCha8Rng,
    ws: &Workspace,
    grid: &EsdfGrid,
    bounds: &SigmaBounds,
    alpha: f64,
    epsilon: f64,
    budget: usize,
) -> Result<GaussianState> {
    bounds.validate()?;
    for _ in 0..budget {
        let x = rng.gen_range(0.0..ws.width());
        let y = rng.gen_range(0.0..ws.height());
        let sx = rng.gen_range(bounds.sigma_min..=bounds.sigma_max);
        let sy = rng.gen_range(bounds.sigma_min..=bounds.sigma_max);
        let rho = rng.gen_range(-bounds.rho_max..=bounds.rho_max);
        if grid.query_sdf(Point::new(x, y))? <= 0.0 {
            continue;
        }
        let state = GaussianState::new(x, y, sx, sy, rho);
        if cvar_collision(&state, grid, alpha)? <= epsilon {
            return Ok(state);
        }
    }
    Err(Error::Sampling(format!(
        "no feasible node found in {budget} draws over a {:.0}x{:.0} scene with {} obstacles",
        ws.width(),
        ws.height(),
        ws.obstacles().len()
    )))
}

/// Checks straight-line feasibility between two states: interpolates the
/// 5-vector at `resolution` points (endpoints included) and requires every
/// interpolant's collision risk to stay at or below `epsilon`.
pub fn connect_edge(
    a: &GaussianState,
    b: &GaussianState,
    grid: &EsdfGrid,
    alpha: f64,
    epsilon: f64,
    resolution: usize,
) -> Result<bool> {
    if resolution < 2 {
        return Err(Error::InvalidParameter(format!(
            "edge resolution must be at least 2, got {resolution}"
        )));
    }
    for i in 0..resolution {
        let t = i as f64 / (resolution - 1) as f64;
        let s = lerp_state(a, b, t);
        let p = s.mean();
        if !grid.in_bounds(Point::new(p.x, p.y)) {
            return Ok(false);
        }
        if cvar_collision(&s, grid, alpha)? > epsilon {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Builds the k-nearest roadmap for the given endpoints. Node sampling and
/// neighbor checks all run at the tightened planning risk bound.
pub fn build_roadmap(
    ws: &Workspace,
    grid: &EsdfGrid,
    start: &GaussianState,
    goal: &GaussianState,
    params: &RoadmapParams,
    seed: u64,
) -> Result<GaussianRoadmap> {
    params.validate()?;
    let eps = params.planning_epsilon();
    let mut rng = stream_rng(seed, Stream::NodeSampling, 1);
    let mut nodes = vec![*start, *goal];
    for _ in 0..params.n_nodes {
        nodes.push(sample_node_with(
            &mut rng,
            ws,
            grid,
            &params.bounds,
            params.alpha,
            eps,
            params.sample_budget,
        )?);
    }

    let n = nodes.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = wasserstein2(&nodes[i], &nodes[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut edges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut try_edge = |i: usize, j: usize, edges: &mut Vec<(usize, usize, f64)>| -> Result<()> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        if a == b || !seen.insert((a, b)) {
            return Ok(());
        }
        let d = dist[a * n + b];
        let res = edge_resolution(d, params.check_spacing);
        if connect_edge(&nodes[a], &nodes[b], grid, params.alpha, eps, res)? {
            edges.push((a, b, d));
        }
        Ok(())
    };

    // The direct edge is always attempted so trivial scenes yield the
    // straight connection regardless of how neighbors fall.
    try_edge(0, 1, &mut edges)?;
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..n {
        order.sort_by(|&a, &b| dist[i * n + a].total_cmp(&dist[i * n + b]));
        for &j in order.iter().filter(|&&j| j != i).take(params.k_neighbors) {
            try_edge(i, j, &mut edges)?;
        }
    }

    Ok(GaussianRoadmap { nodes, edges, start: 0, goal: 1 })
}

/// Dijkstra over the roadmap's edge costs. Returns node indices from start
/// to goal inclusive.
pub fn shortest_path(roadmap: &GaussianRoadmap) -> Result<Vec<usize>> {
    let n = roadmap.nodes.len();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(i, j, c) in &roadmap.edges {
        adj[i].push((j, c));
        adj[j].push((i, c));
    }

    #[derive(PartialEq)]
    struct Entry(f64, usize);
    impl Eq for Entry {}
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    let mut cost = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = std::collections::BinaryHeap::new();
    cost[roadmap.start] = 0.0;
    heap.push(Entry(0.0, roadmap.start));
    while let Some(Entry(c, u)) = heap.pop() {
        if c > cost[u] {
            continue;
        }
        if u == roadmap.goal {
            break;
        }
        for &(v, w) in &adj[u] {
            let nc = c + w;
            if nc < cost[v] {
                cost[v] = nc;
                prev[v] = u;
                heap.push(Entry(nc, v));
            }
        }
    }

    if !cost[roadmap.goal].is_finite() {
        return Err(Error::NoPath);
    }
    let mut path = vec![roadmap.goal];
    while *path.last().unwrap() != roadmap.start {
        path.push(prev[*path.last().unwrap()]);
    }
    path.reverse();
    Ok(path)
}

/// Resamples a polyline to exactly `n_out` nodes by W2 arc length. Original
/// vertices are preserved whenever they fit (segment interval counts are
/// allocated proportionally to length, at least one each), so every output
/// pair lies within a single original segment and inherits its feasibility.
pub fn resample_polyline(states: &[GaussianState], n_out: usize) -> Result<Vec<GaussianState>> {
    if states.is_empty() || n_out < 2 {
        return Err(Error::InvalidParameter(
            "resampling needs a nonempty polyline and at least 2 output nodes".to_string(),
        ));
    }

    let mut verts: Vec<GaussianState> = vec![states[0]];
    for s in &states[1..] {
        if wasserstein2(verts.last().unwrap(), s) > 1e-12 {
            verts.push(*s);
        }
    }
    if verts.len() == 1 {
        let mut out = vec![states[0]; n_out];
        *out.last_mut().unwrap() = *states.last().unwrap();
        return Ok(out);
    }

    let lens: Vec<f64> = verts.windows(2).map(|w| wasserstein2(&w[0], &w[1])).collect();
    let total: f64 = lens.iter().sum();
    let m = lens.len();
    let intervals = n_out - 1;

    if m > intervals {
        // More vertices than slots: fall back to uniform arc length.
        let mut out = vec![verts[0]];
        let mut seg = 0;
        let mut acc = 0.0;
        for j in 1..intervals {
            let target = total * j as f64 / intervals as f64;
            while seg < m - 1 && acc + lens[seg] < target {
                acc += lens[seg];
                seg += 1;
            }
            let t = ((target - acc) / lens[seg]).clamp(0.0, 1.0);
            out.push(lerp_state(&verts[seg], &verts[seg + 1], t));
        }
        out.push(*verts.last().unwrap());
        return Ok(out);
    }

    let mut alloc = vec![1usize; m];
    let mut remaining = intervals - m;
    while remaining > 0 {
        let (best, _) = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| (i, intervals as f64 * l / total - alloc[i] as f64))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        alloc[best] += 1;
        remaining -= 1;
    }

    let mut out = vec![verts[0]];
    for (i, &k) in alloc.iter().enumerate() {
        for j in 1..=k {
            if j == k {
                out.push(verts[i + 1]);
            } else {
                out.push(lerp_state(&verts[i], &verts[i + 1], j as f64 / k as f64));
            }
        }
    }
    debug_assert_eq!(out.len(), n_out);
    Ok(out)
}

/// Plans one feasible Gaussian trajectory: samples a roadmap, runs shortest
/// path, and resamples the result to `DATASET_NODES` states spanning
/// `params.duration` seconds.
pub fn plan_roadmap_path(
    ws: &Workspace,
    grid: &EsdfGrid,
    start: &GaussianState,
    goal: &GaussianState,
    params: &RoadmapParams,
    seed: u64,
) -> Result<GaussianTrajectory> {
    params.validate()?;
    let eps = params.planning_epsilon();
    for (name, s) in [("start", start), ("goal", goal)] {
        if cvar_collision(s, grid, params.alpha)? > eps {
            return Err(Error::InvalidParameter(format!(
                "{name} state at ({:.2}, {:.2}) violates the planning risk bound",
                s.x(),
                s.y()
            )));
        }
    }
    let roadmap = build_roadmap(ws, grid, start, goal, params, seed)?;
    let path = shortest_path(&roadmap)?;
    let polyline: Vec<GaussianState> = path.iter().map(|&i| roadmap.nodes[i]).collect();
    let nodes = resample_polyline(&polyline, file::DATASET_NODES)?;
    let dt = params.duration / (file::DATASET_NODES - 1) as f64;
    GaussianTrajectory::new(nodes, dt)
}
