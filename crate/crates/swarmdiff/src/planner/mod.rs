//! Macroscopic planning: one guided trajectory per endpoint-component
//! pair, transport weights from an exact LP, and the resulting weighted
//! mixture of Gaussian trajectories.

mod transport;

pub use transport::{solve_transport_lp, solve_transport_lp_with_duals};

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::costs::{
    collision_cost, cvar_collision, total_cost, CostWeights, GaussianTrajectory, GpModel,
};
use crate::diffusion::{guided_sample, Context, DiffusionModel, SampleConfig};
use crate::error::{Error, Result};
use crate::gaussian::{wasserstein2, GaussianState, Gmm};
use crate::geom::{EsdfGrid, ScenarioFile, Workspace};
use crate::rng::{derive_seed, Stream};

/// Knobs of the macroscopic planning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacroParams {
    /// Guided draws per component pair; the cheapest is kept.
    pub samples_per_pair: usize,
    pub guidance_weight: f64,
    /// W2 distance below which time-slice components merge. 0 disables.
    pub merge_threshold: f64,
    /// A best trajectory whose collision cost exceeds this fails the plan.
    pub collision_hard_cap: f64,
    /// Sampling horizon; None uses the model's training horizon.
    pub horizon: Option<usize>,
}

impl Default for MacroParams {
    fn default() -> Self {
        Self {
            samples_per_pair: 4,
            guidance_weight: 0.3,
            merge_threshold: 0.05,
            collision_hard_cap: 10.0,
            horizon: None,
        }
    }
}

impl MacroParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.samples_per_pair == 0 {
            problems.push("samples_per_pair must be positive".to_string());
        }
        if !(self.guidance_weight >= 0.0 && self.guidance_weight.is_finite()) {
            problems.push(format!(
                "guidance_weight must be nonnegative, got {}",
                self.guidance_weight
            ));
        }
        if !(self.merge_threshold >= 0.0 && self.merge_threshold.is_finite()) {
            problems.push(format!(
                "merge_threshold must be nonnegative, got {}",
                self.merge_threshold
            ));
        }
        if !(self.collision_hard_cap >= 0.0) {
            problems.push(format!(
                "collision_hard_cap must be nonnegative, got {}",
                self.collision_hard_cap
            ));
        }
        if let Some(h) = self.horizon {
            if h < 2 {
                problems.push(format!("horizon must be at least 2, got {h}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }
}

/// Weighted family of Gaussian trajectories connecting two endpoint
/// mixtures, with the transport plan that produced the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmTrajectory {
    trajectories: Vec<GaussianTrajectory>,
    alphas: Vec<f64>,
    /// (start component, goal component) served by each trajectory.
    pairs: Vec<(usize, usize)>,
    plan: Array2<f64>,
    start_gmm: Gmm,
    goal_gmm: Gmm,
    merge_threshold: f64,
}

impl GmmTrajectory {
    /// Validates all structural invariants: weight normalization, the
    /// plan/alpha correspondence, and marginal consistency.
    pub fn new(
        trajectories: Vec<GaussianTrajectory>,
        alphas: Vec<f64>,
        pairs: Vec<(usize, usize)>,
        plan: Array2<f64>,
        start_gmm: Gmm,
        goal_gmm: Gmm,
        merge_threshold: f64,
    ) -> Result<Self> {
        let k = trajectories.len();
        if k == 0 {
            return Err(Error::InvalidParameter("plan holds no trajectories".to_string()));
        }
        if alphas.len() != k || pairs.len() != k {
            return Err(Error::InvalidParameter(format!(
                "{k} trajectories but {} weights and {} pairs",
                alphas.len(),
                pairs.len()
            )));
        }
        if alphas.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidParameter(
                "trajectory weights must be positive and finite".to_string(),
            ));
        }
        let total: f64 = alphas.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "trajectory weights sum to {total}, expected 1"
            )));
        }
        if !(merge_threshold >= 0.0 && merge_threshold.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "merge threshold must be nonnegative, got {merge_threshold}"
            )));
        }
        let (n1, n2) = (start_gmm.len(), goal_gmm.len());
        if plan.nrows() != n1 || plan.ncols() != n2 {
            return Err(Error::InvalidParameter(format!(
                "plan is {}x{}, endpoint mixtures demand {n1}x{n2}",
                plan.nrows(),
                plan.ncols()
            )));
        }
        let positive = plan.iter().filter(|&&p| p > 0.0).count();
        if positive != k {
            return Err(Error::InvalidParameter(format!(
                "plan has {positive} positive entries but {k} trajectories"
            )));
        }
        for (idx, &(i, j)) in pairs.iter().enumerate() {
            if i >= n1 || j >= n2 {
                return Err(Error::InvalidParameter(format!(
                    "pair ({i}, {j}) outside the {n1}x{n2} plan"
                )));
            }
            if (plan[(i, j)] - alphas[idx]).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "weight {} of trajectory {idx} disagrees with plan entry {}",
                    alphas[idx],
                    plan[(i, j)]
                )));
            }
        }
        for i in 0..n1 {
            if (plan.row(i).sum() - start_gmm.weights()[i]).abs() > 1e-8 {
                return Err(Error::InfeasibleMarginals(format!(
                    "plan row {i} sums to {}, start weight is {}",
                    plan.row(i).sum(),
                    start_gmm.weights()[i]
                )));
            }
        }
        for j in 0..n2 {
            if (plan.column(j).sum() - goal_gmm.weights()[j]).abs() > 1e-8 {
                return Err(Error::InfeasibleMarginals(format!(
                    "plan column {j} sums to {}, goal weight is {}",
                    plan.column(j).sum(),
                    goal_gmm.weights()[j]
                )));
            }
        }
        let h = trajectories[0].len();
        let dt = trajectories[0].dt();
        for (idx, t) in trajectories.iter().enumerate() {
            if t.len() != h || t.dt() != dt {
                return Err(Error::InvalidParameter(format!(
                    "trajectory {idx} has {} nodes at dt {}, expected {h} at {dt}",
                    t.len(),
                    t.dt()
                )));
            }
        }
        Ok(Self { trajectories, alphas, pairs, plan, start_gmm, goal_gmm, merge_threshold })
    }

    pub fn trajectories(&self) -> &[GaussianTrajectory] {
        &self.trajectories
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn plan(&self) -> &Array2<f64> {
        &self.plan
    }

    pub fn start_gmm(&self) -> &Gmm {
        &self.start_gmm
    }

    pub fn goal_gmm(&self) -> &Gmm {
        &self.goal_gmm
    }

    pub fn merge_threshold(&self) -> f64 {
        self.merge_threshold
    }

    /// Number of component trajectories.
    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    /// Nodes per trajectory.
    pub fn horizon(&self) -> usize {
        self.trajectories[0].len()
    }

    pub fn dt(&self) -> f64 {
        self.trajectories[0].dt()
    }

    /// Mixture of all component states at one time index, merging
    /// components closer than the merge threshold by moment matching.
    pub fn evaluate_at(&self, t_index: usize) -> Result<Gmm> {
        if t_index >= self.horizon() {
            return Err(Error::InvalidParameter(format!(
                "time index {t_index} outside horizon {}",
                self.horizon()
            )));
        }
        let mut comps: Vec<(f64, GaussianState)> = self
            .trajectories
            .iter()
            .zip(&self.alphas)
            .map(|(t, &a)| (a, t.states()[t_index]))
            .collect();

        if self.merge_threshold > 0.0 {
            loop {
                let mut best: Option<(usize, usize, f64)> = None;
                for a in 0..comps.len() {
                    for b in (a + 1)..comps.len() {
                        let d = wasserstein2(&comps[a].1, &comps[b].1);
                        if d < self.merge_threshold
                            && best.map_or(true, |(_, _, bd)| d < bd)
                        {
                            best = Some((a, b, d));
                        }
                    }
                }
                let Some((a, b, _)) = best else { break };
                let merged = merge_pair(comps[a], comps[b]);
                comps[a] = merged;
                comps.remove(b);
            }
        }

        let (weights, components): (Vec<f64>, Vec<GaussianState>) = comps.into_iter().unzip();
        Gmm::new(components, weights)
    }
}

/// Moment-matched merge of two weighted components.
fn merge_pair(a: (f64, GaussianState), b: (f64, GaussianState)) -> (f64, GaussianState) {
    let w = a.0 + b.0;
    let mu = (a.1.mean() * a.0 + b.1.mean() * b.0) / w;
    let spread = |g: &GaussianState, wi: f64| -> Matrix2<f64> {
        let d: Vector2<f64> = g.mean() - mu;
        (g.covariance() + d * d.transpose()) * wi
    };
    let cov = (spread(&a.1, a.0) + spread(&b.1, b.0)) / w;
    let merged = GaussianState::from_covariance(mu, cov)
        .expect("moment-matched covariance of SPD inputs is SPD");
    (w, merged)
}

/// Time-slice mixture of a plan; free function form of
/// [`GmmTrajectory::evaluate_at`].
pub fn evaluate_gmm_at(gmm_traj: &GmmTrajectory, t_index: usize) -> Result<Gmm> {
    gmm_traj.evaluate_at(t_index)
}

/// Assembles the cost matrix from one sampled trajectory per component
/// pair.
pub fn pairwise_trajectory_costs(
    trajs: &BTreeMap<(usize, usize), GaussianTrajectory>,
    n1: usize,
    n2: usize,
    grid: &EsdfGrid,
    weights: &CostWeights,
    gp: &GpModel,
) -> Result<Array2<f64>> {
    let mut cost = Array2::zeros((n1, n2));
    for i in 0..n1 {
        for j in 0..n2 {
            let traj = trajs.get(&(i, j)).ok_or(Error::PlanningFailed {
                start: i,
                goal: j,
                reason: "no sampled trajectory for this pair".to_string(),
            })?;
            let c = total_cost(traj, grid, weights, gp)?;
            if !c.is_finite() {
                return Err(Error::PlanningFailed {
                    start: i,
                    goal: j,
                    reason: format!("non-finite trajectory cost {c}"),
                });
            }
            cost[(i, j)] = c;
        }
    }
    Ok(cost)
}

/// Worst per-state collision risk over every component trajectory.
pub fn max_plan_cvar(traj: &GmmTrajectory, grid: &EsdfGrid, alpha: f64) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for t in traj.trajectories() {
        for s in t.states() {
            worst = worst.max(cvar_collision(s, grid, alpha)?);
        }
    }
    Ok(worst)
}

/// Macroscopic planning: best-of-k guided sampling per endpoint pair,
/// transport LP over realized trajectory costs, mixture assembly.
#[allow(clippy::too_many_arguments)]
pub fn plan_macro(
    grid: &EsdfGrid,
    start_gmm: &Gmm,
    goal_gmm: &Gmm,
    weights: &CostWeights,
    gp: &GpModel,
    model: &DiffusionModel,
    params: &MacroParams,
    seed: u64,
) -> Result<GmmTrajectory> {
    params.validate()?;
    weights.validate()?;
    for (name, gmm) in [("start", start_gmm), ("goal", goal_gmm)] {
        for (idx, c) in gmm.components().iter().enumerate() {
            let risk = cvar_collision(c, grid, weights.alpha)?;
            if risk > weights.epsilon {
                return Err(Error::InvalidParameter(format!(
                    "{name} component {idx} violates the risk bound: \
                     CVaR {risk:.3} > {}",
                    weights.epsilon
                )));
            }
        }
    }

    let n1 = start_gmm.len();
    let n2 = goal_gmm.len();
    let cfg = SampleConfig {
        horizon: params.horizon.unwrap_or(model.trained_h),
        dt: model.dt,
        n_samples: params.samples_per_pair,
        guidance_weight: params.guidance_weight,
    };

    let mut best_trajs: BTreeMap<(usize, usize), GaussianTrajectory> = BTreeMap::new();
    let mut cost = Array2::zeros((n1, n2));
    for i in 0..n1 {
        for j in 0..n2 {
            let pair_index = (i * n2 + j) as u64;
            let ctx = Context::new(start_gmm.components()[i], goal_gmm.components()[j], grid)?;
            let pair_seed = derive_seed(seed, Stream::Generic, pair_index);
            let samples = guided_sample(model, &ctx, grid, weights, gp, &cfg, pair_seed)
                .map_err(|e| Error::PlanningFailed {
                    start: i,
                    goal: j,
                    reason: e.to_string(),
                })?;
            let mut best: Option<(f64, GaussianTrajectory)> = None;
            for t in samples.trajectories {
                let c = total_cost(&t, grid, weights, gp)?;
                if best.as_ref().map_or(true, |(bc, _)| c < *bc) {
                    best = Some((c, t));
                }
            }
            let (c, traj) = best.expect("samples_per_pair is validated positive");
            let collision = collision_cost(&traj, grid, weights.alpha, weights.epsilon)?;
            if collision > params.collision_hard_cap {
                return Err(Error::PlanningFailed {
                    start: i,
                    goal: j,
                    reason: format!(
                        "best of {} samples still has collision cost {collision:.3} \
                         above the cap {}",
                        params.samples_per_pair, params.collision_hard_cap
                    ),
                });
            }
            cost[(i, j)] = c;
            best_trajs.insert((i, j), traj);
        }
    }

    let psi = solve_transport_lp(&cost, start_gmm.weights(), goal_gmm.weights())?;
    let mut trajectories = Vec::new();
    let mut alphas = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..n1 {
        for j in 0..n2 {
            if psi[(i, j)] > 0.0 {
                trajectories.push(best_trajs.remove(&(i, j)).expect("pair was sampled"));
                alphas.push(psi[(i, j)]);
                pairs.push((i, j));
            }
        }
    }
    GmmTrajectory::new(
        trajectories,
        alphas,
        pairs,
        psi,
        start_gmm.clone(),
        goal_gmm.clone(),
        params.merge_threshold,
    )
}

const PLAN_FORMAT: &str = "swarmdiff-plan";
const PLAN_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GmmRepr {
    weights: Vec<f64>,
    components: Vec<[f64; 5]>,
}

impl GmmRepr {
    fn from(g: &Gmm) -> Self {
        Self {
            weights: g.weights().to_vec(),
            components: g.components().iter().map(|c| c.to_array()).collect(),
        }
    }

    fn build(self) -> Result<Gmm> {
        Gmm::new(self.components.into_iter().map(GaussianState::from_array).collect(), self.weights)
    }
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<serde_json::Value>,
    dt: f64,
    merge_threshold: f64,
    alphas: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    trajectories: Vec<Vec<[f64; 5]>>,
    plan_rows: usize,
    plan_cols: usize,
    plan: Vec<f64>,
    start_gmm: GmmRepr,
    goal_gmm: GmmRepr,
}

/// Serializes a plan, optionally embedding the scene it was made for and
/// the hash of the producing configuration.
pub fn plan_to_json(
    traj: &GmmTrajectory,
    scene: Option<&Workspace>,
    config_hash: Option<&str>,
) -> String {
    let file = PlanFile {
        format: PLAN_FORMAT.to_string(),
        version: PLAN_VERSION,
        config_hash: config_hash.map(str::to_string),
        scene: scene.map(|ws| {
            serde_json::to_value(ScenarioFile::from_workspace(ws))
                .expect("workspace serialization cannot fail")
        }),
        dt: traj.dt(),
        merge_threshold: traj.merge_threshold(),
        alphas: traj.alphas().to_vec(),
        pairs: traj.pairs().to_vec(),
        trajectories: traj
            .trajectories()
            .iter()
            .map(|t| t.states().iter().map(|s| s.to_array()).collect())
            .collect(),
        plan_rows: traj.plan().nrows(),
        plan_cols: traj.plan().ncols(),
        plan: traj.plan().iter().copied().collect(),
        start_gmm: GmmRepr::from(traj.start_gmm()),
        goal_gmm: GmmRepr::from(traj.goal_gmm()),
    };
    serde_json::to_string_pretty(&file).expect("plan serialization cannot fail")
}

/// Parses a plan document, revalidating every structural invariant.
/// Returns the plan together with the embedded scene and config hash.
pub fn plan_from_json(text: &str) -> Result<(GmmTrajectory, Option<Workspace>, Option<String>)> {
    let file: PlanFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: 0,
        detail: format!("plan json: {e}"),
    })?;
    if file.format != PLAN_FORMAT {
        return Err(Error::Format(format!(
            "not a plan file (format field is '{}')",
            file.format
        )));
    }
    if file.version != PLAN_VERSION {
        return Err(Error::Format(format!(
            "unsupported plan version {} (expected {PLAN_VERSION})",
            file.version
        )));
    }
    if !(file.dt > 0.0 && file.dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("plan dt must be positive, got {}", file.dt)));
    }
    if file.plan.len() != file.plan_rows * file.plan_cols {
        return Err(Error::Format(format!(
            "plan matrix holds {} values, expected {}x{}",
            file.plan.len(),
            file.plan_rows,
            file.plan_cols
        )));
    }
    let plan = Array2::from_shape_vec((file.plan_rows, file.plan_cols), file.plan)
        .expect("length checked above");
    let trajectories: Vec<GaussianTrajectory> = file
        .trajectories
        .into_iter()
        .map(|states| {
            GaussianTrajectory::new(
                states.into_iter().map(GaussianState::from_array).collect(),
                file.dt,
            )
        })
        .collect::<Result<_>>()?;
    let scene = file
        .scene
        .map(|v| {
            let text = serde_json::to_string(&v).expect("value serialization cannot fail");
            Workspace::from_json(&text)
        })
        .transpose()?;
    let traj = GmmTrajectory::new(
        trajectories,
        file.alphas,
        file.pairs,
        plan,
        file.start_gmm.build()?,
        file.goal_gmm.build()?,
        file.merge_threshold,
    )?;
    Ok((traj, scene, file.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Arch, DenoiserParams, NoiseSchedule, NormStats};
    use crate::geom::{rect, EsdfOptions};

    fn test_model(trained_h: usize) -> DiffusionModel {
        let arch = Arch { model_dim: 16, n_heads: 2, n_layers: 2, ctx_dim: 36 };
        let states: Vec<GaussianState> = (0..16)
            .map(|i| {
                let s = i as f64 / 15.0;
                GaussianState::new(
                    5.0 + 40.0 * s,
                    5.0 + 30.0 * s,
                    1.0 + 0.4 * s,
                    1.2 - 0.3 * s,
                    0.2 * (2.0 * s - 1.0),
                )
            })
            .collect();
        let trajs = vec![GaussianTrajectory::new(states, 0.5).unwrap()];
        let ctxs = vec![vec![0.4; 26]];
        let norm = NormStats::fit(&trajs, &ctxs).unwrap();
        DiffusionModel {
            params: DenoiserParams::init_dense(&arch, 404).unwrap(),
            schedule: NoiseSchedule::cosine(15).unwrap(),
            norm,
            trained_h,
            dt: 0.5,
        }
    }

    fn empty_grid() -> EsdfGrid {
        let ws = Workspace::new(60.0, 50.0, vec![]).unwrap();
        EsdfGrid::build(&ws, EsdfOptions { resolution: 0.5 }).unwrap()
    }

    fn planning_bits() -> (CostWeights, GpModel) {
        let w = CostWeights::default();
        (w, GpModel::new(0.5, 1.0, 1.0).unwrap())
    }

    #[test]
    fn single_pair_empty_scene_plans_with_one_component() {
        let grid = empty_grid();
        let (w, gp) = planning_bits();
        let model = test_model(12);
        let start = Gmm::uniform(vec![GaussianState::new(8.0, 8.0, 1.0, 1.0, 0.0)]).unwrap();
        let goal = Gmm::uniform(vec![GaussianState::new(50.0, 42.0, 1.0, 1.0, 0.0)]).unwrap();
        let params = MacroParams {
            samples_per_pair: 2,
            collision_hard_cap: f64::INFINITY,
            ..MacroParams::default()
        };
        let plan = plan_macro(&grid, &start, &goal, &w, &gp, &model, &params, 3).unwrap();
        assert_eq!(plan.k(), 1);
        assert_eq!(plan.alphas(), &[1.0]);
        let t = &plan.trajectories()[0];
        assert_eq!(t.states()[0].to_array(), start.components()[0].to_array());
        assert_eq!(
            t.states()[t.len() - 1].to_array(),
            goal.components()[0].to_array()
        );
    }

    #[test]
    fn two_by_two_marginals_hold() {
        let grid = empty_grid();
        let (w, gp) = planning_bits();
        let model = test_model(12);
        let start = Gmm::new(
            vec![
                GaussianState::new(8.0, 12.0, 1.0, 1.0, 0.0),
                GaussianState::new(8.0, 38.0, 1.0, 1.0, 0.0),
            ],
            vec![0.4, 0.6],
        )
        .unwrap();
        let goal = Gmm::new(
            vec![
                GaussianState::new(52.0, 12.0, 1.0, 1.0, 0.0),
                GaussianState::new(52.0, 38.0, 1.0, 1.0, 0.0),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let params = MacroParams {
            samples_per_pair: 1,
            collision_hard_cap: f64::INFINITY,
            ..MacroParams::default()
        };
        let plan = plan_macro(&grid, &start, &goal, &w, &gp, &model, &params, 7).unwrap();
        for i in 0..2 {
            assert!((plan.plan().row(i).sum() - start.weights()[i]).abs() <= 1e-8);
        }
        for j in 0..2 {
            assert!((plan.plan().column(j).sum() - goal.weights()[j]).abs() <= 1e-8);
        }
        assert!(plan.k() <= 3);
        let total: f64 = plan.alphas().iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn plan_macro_is_deterministic_per_seed() {
        let grid = empty_grid();
        let (w, gp) = planning_bits();
        let model = test_model(10);
        let start = Gmm::uniform(vec![GaussianState::new(8.0, 8.0, 1.0, 1.0, 0.0)]).unwrap();
        let goal = Gmm::uniform(vec![GaussianState::new(50.0, 42.0, 1.0, 1.0, 0.0)]).unwrap();
        let params = MacroParams {
            samples_per_pair: 2,
            collision_hard_cap: f64::INFINITY,
            ..MacroParams::default()
        };
        let a = plan_macro(&grid, &start, &goal, &w, &gp, &model, &params, 11).unwrap();
        let b = plan_macro(&grid, &start, &goal, &w, &gp, &model, &params, 11).unwrap();
        assert_eq!(a, b);
        let c = plan_macro(&grid, &start, &goal, &w, &gp, &model, &params, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hard_cap_failure_names_the_pair() {
        // Endpoints sit in the open corners, but the center is a large
        // obstacle an untrained model wanders into.
        let ws =
            Workspace::new(60.0, 50.0, vec![rect(15.0, 10.0, 45.0, 40.0).unwrap()]).unwrap();
        let grid = EsdfGrid::build(&ws, EsdfOptions { resolution: 0.5 }).unwrap();
        let (w, gp) = planning_bits();
        let model = test_model(12);
        let start = Gmm::uniform(vec![GaussianState::new(5.0, 5.0, 0.8, 0.8, 0.0)]).unwrap();
        let goal = Gmm::uniform(vec![GaussianState::new(55.0, 45.0, 0.8, 0.8, 0.0)]).unwrap();
        let params = MacroParams {
            samples_per_pair: 1,
            collision_hard_cap: 0.0,
            ..MacroParams::default()
        };
        let err = plan_macro(&grid, &start, &goal, &w, &gp, &model, &params, 5).unwrap_err();
        match err {
            Error::PlanningFailed { start: 0, goal: 0, .. } => {}
            other => panic!("expected a planning failure naming pair (0, 0), got {other:?}"),
        }
    }

    #[test]
    fn infeasible_endpoint_component_is_rejected_up_front() {
        let ws =
            Workspace::new(60.0, 50.0, vec![rect(15.0, 10.0, 45.0, 40.0).unwrap()]).unwrap();
        let grid = EsdfGrid::build(&ws, EsdfOptions { resolution: 0.5 }).unwrap();
        let (w, gp) = planning_bits();
        let model = test_model(12);
        // Start mean deep inside the obstacle.
        let start = Gmm::uniform(vec![GaussianState::new(30.0, 25.0, 1.0, 1.0, 0.0)]).unwrap();
        let goal = Gmm::uniform(vec![GaussianState::new(55.0, 45.0, 1.0, 1.0, 0.0)]).unwrap();
        let err = plan_macro(&grid, &start, &goal, &w, &gp, &model, &MacroParams::default(), 5)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)), "got {err:?}");
    }

    fn synthetic_plan(merge_threshold: f64) -> GmmTrajectory {
        let mk = |x0: f64, y0: f64| {
            let states: Vec<GaussianState> = (0..8)
                .map(|t| GaussianState::new(x0 + t as f64, y0, 1.0, 1.0, 0.0))
                .collect();
            GaussianTrajectory::new(states, 0.5).unwrap()
        };
        let t1 = mk(0.0, 0.0);
        let t2 = mk(0.0, 10.0);
        let start = Gmm::new(
            vec![t1.states()[0], t2.states()[0]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let goal = Gmm::new(
            vec![t1.states()[7], t2.states()[7]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let mut psi = Array2::zeros((2, 2));
        psi[(0, 0)] = 0.5;
        psi[(1, 1)] = 0.5;
        GmmTrajectory::new(
            vec![t1, t2],
            vec![0.5, 0.5],
            vec![(0, 0), (1, 1)],
            psi,
            start,
            goal,
            merge_threshold,
        )
        .unwrap()
    }

    #[test]
    fn evaluate_single_component_returns_that_state() {
        let plan = synthetic_plan(0.05);
        let states: Vec<GaussianState> =
            (0..8).map(|t| GaussianState::new(t as f64, 0.0, 1.0, 1.0, 0.0)).collect();
        let traj = GaussianTrajectory::new(states.clone(), 0.5).unwrap();
        let start = Gmm::uniform(vec![states[0]]).unwrap();
        let goal = Gmm::uniform(vec![states[7]]).unwrap();
        let mut psi = Array2::zeros((1, 1));
        psi[(0, 0)] = 1.0;
        let single =
            GmmTrajectory::new(vec![traj], vec![1.0], vec![(0, 0)], psi, start, goal, 0.05)
                .unwrap();
        let gmm = single.evaluate_at(3).unwrap();
        assert_eq!(gmm.len(), 1);
        assert_eq!(gmm.weights(), &[1.0]);
        assert_eq!(gmm.components()[0].to_array(), states[3].to_array());
        // Distant components of the two-trajectory plan stay separate.
        assert_eq!(plan.evaluate_at(3).unwrap().len(), 2);
    }

    #[test]
    fn identical_components_merge_to_weight_one() {
        let states: Vec<GaussianState> =
            (0..8).map(|t| GaussianState::new(t as f64, 0.0, 1.0, 1.0, 0.0)).collect();
        let t1 = GaussianTrajectory::new(states.clone(), 0.5).unwrap();
        let t2 = t1.clone();
        let start = Gmm::new(vec![states[0], states[0]], vec![0.5, 0.5]).unwrap();
        let goal = Gmm::new(vec![states[7], states[7]], vec![0.5, 0.5]).unwrap();
        let mut psi = Array2::zeros((2, 2));
        psi[(0, 0)] = 0.5;
        psi[(1, 1)] = 0.5;
        let plan = GmmTrajectory::new(
            vec![t1, t2],
            vec![0.5, 0.5],
            vec![(0, 0), (1, 1)],
            psi,
            start,
            goal,
            0.05,
        )
        .unwrap();
        let gmm = plan.evaluate_at(4).unwrap();
        assert_eq!(gmm.len(), 1);
        assert_eq!(gmm.weights(), &[1.0]);
    }

    #[test]
    fn zero_threshold_disables_merging() {
        let states: Vec<GaussianState> =
            (0..8).map(|t| GaussianState::new(t as f64, 0.0, 1.0, 1.0, 0.0)).collect();
        let t1 = GaussianTrajectory::new(states.clone(), 0.5).unwrap();
        let t2 = t1.clone();
        let start = Gmm::new(vec![states[0], states[0]], vec![0.5, 0.5]).unwrap();
        let goal = Gmm::new(vec![states[7], states[7]], vec![0.5, 0.5]).unwrap();
        let mut psi = Array2::zeros((2, 2));
        psi[(0, 0)] = 0.5;
        psi[(1, 1)] = 0.5;
        let plan = GmmTrajectory::new(
            vec![t1, t2],
            vec![0.5, 0.5],
            vec![(0, 0), (1, 1)],
            psi,
            start,
            goal,
            0.0,
        )
        .unwrap();
        let gmm = plan.evaluate_at(4).unwrap();
        assert_eq!(gmm.len(), 2);
        assert_eq!(gmm.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn merged_weights_always_sum_to_one() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(9, Stream::Generic, 5);
        for _ in 0..30 {
            let k = rng.gen_range(2..6);
            let h = 6;
            let mut trajs = Vec::new();
            let mut weights = Vec::new();
            for _ in 0..k {
                let x0: f64 = rng.gen_range(0.0..3.0);
                let y0: f64 = rng.gen_range(0.0..3.0);
                let states: Vec<GaussianState> = (0..h)
                    .map(|t| GaussianState::new(x0 + t as f64, y0, 1.0, 1.0, 0.0))
                    .collect();
                trajs.push(GaussianTrajectory::new(states, 0.5).unwrap());
                weights.push(rng.gen_range(0.1..1.0));
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let drift: f64 = weights.iter().sum::<f64>() - 1.0;
            weights[0] -= drift;

            let start =
                Gmm::new(trajs.iter().map(|t| t.states()[0]).collect(), weights.clone()).unwrap();
            let goal = Gmm::new(
                trajs.iter().map(|t| t.states()[h - 1]).collect(),
                weights.clone(),
            )
            .unwrap();
            let mut psi = Array2::zeros((k, k));
            for (i, &w) in weights.iter().enumerate() {
                psi[(i, i)] = w;
            }
            let pairs: Vec<(usize, usize)> = (0..k).map(|i| (i, i)).collect();
            let plan = GmmTrajectory::new(
                trajs,
                weights,
                pairs,
                psi,
                start,
                goal,
                3.0,
            )
            .unwrap();
            for t in 0..h {
                let gmm = plan.evaluate_at(t).unwrap();
                let sum: f64 = gmm.weights().iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn pairwise_costs_match_recomputation_and_flag_missing_pairs() {
        let grid = empty_grid();
        let (w, gp) = planning_bits();
        let states: Vec<GaussianState> =
            (0..8).map(|t| GaussianState::new(5.0 + t as f64, 5.0, 1.0, 1.0, 0.0)).collect();
        let traj = GaussianTrajectory::new(states, 0.5).unwrap();
        let mut map = BTreeMap::new();
        map.insert((0usize, 0usize), traj.clone());
        let cost = pairwise_trajectory_costs(&map, 1, 1, &grid, &w, &gp).unwrap();
        assert_eq!(cost[(0, 0)], total_cost(&traj, &grid, &w, &gp).unwrap());

        let err = pairwise_trajectory_costs(&map, 2, 1, &grid, &w, &gp).unwrap_err();
        assert!(matches!(err, Error::PlanningFailed { start: 1, goal: 0, .. }), "{err:?}");
    }

    #[test]
    fn plan_json_round_trip_is_exact_and_deterministic() {
        let plan = synthetic_plan(0.05);
        let ws = Workspace::new(60.0, 50.0, vec![rect(10.0, 10.0, 20.0, 20.0).unwrap()]).unwrap();
        let text = plan_to_json(&plan, Some(&ws), Some("abc123"));
        let again = plan_to_json(&plan, Some(&ws), Some("abc123"));
        assert_eq!(text, again);
        let (back, scene, hash) = plan_from_json(&text).unwrap();
        assert_eq!(back, plan);
        assert_eq!(hash.as_deref(), Some("abc123"));
        assert_eq!(scene.unwrap().obstacles().len(), 1);
        // And the reparsed plan serializes identically.
        assert_eq!(plan_to_json(&back, Some(&ws), Some("abc123")), text);
    }

    #[test]
    fn malformed_plan_documents_are_rejected() {
        assert!(matches!(plan_from_json("not json"), Err(Error::Parse { .. })));
        let plan = synthetic_plan(0.0);
        let good = plan_to_json(&plan, None, None);
        let bad_format = good.replacen(PLAN_FORMAT, "something-else", 1);
        assert!(matches!(plan_from_json(&bad_format), Err(Error::Format(_))));
        // Corrupting a weight breaks the sum-to-one invariant.
        let bad_weights = good.replacen("0.5", "0.7", 1);
        assert!(plan_from_json(&bad_weights).is_err());
    }
}
