//! Macroscopic trajectory cost terms and the gradient that steers sampling.
//!
//! Three terms are combined: a collision tail-risk hinge against the signed
//! distance field, cumulative Wasserstein-2 transport length, and a
//! constant-velocity smoothness prior over an extended 10-dim state.

mod gp;
mod normal;

pub use gp::GpModel;
pub use normal::{norm_pdf, norm_quantile};

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{wasserstein2, wasserstein2_sq, GaussianState};
use crate::geom::EsdfGrid;

/// Time-stamped sequence of Gaussian states.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTrajectory {
    states: Vec<GaussianState>,
    dt: f64,
}

impl GaussianTrajectory {
    pub fn new(states: Vec<GaussianState>, dt: f64) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "trajectory needs at least 2 states, got {}",
                states.len()
            )));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { states, dt })
    }

    pub fn states(&self) -> &[GaussianState] {
        &self.states
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Weights and risk parameters of the combined cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub lambda_obs: f64,
    pub lambda_dis: f64,
    pub lambda_gp: f64,
    /// Tail mass of the collision risk measure, in (0, 1).
    pub alpha: f64,
    /// Safety margin subtracted inside the collision hinge, meters.
    pub epsilon: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_obs: 1.0,
            lambda_dis: 0.05,
            lambda_gp: 0.02,
            alpha: 0.1,
            epsilon: 0.5,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("lambda_obs", self.lambda_obs),
            ("lambda_dis", self.lambda_dis),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                problems.push(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            problems.push(format!("alpha must lie strictly in (0, 1), got {}", self.alpha));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            problems.push(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }
}

/// Tail-risk multiplier φ(Φ⁻¹(1−α)) / α. Decreasing in α.
pub fn cvar_multiplier(alpha: f64) -> f64 {
    norm_pdf(norm_quantile(1.0 - alpha)) / alpha
}

/// Worst-tail collision measure of one state against the distance field:
/// −s(μ) + multiplier(α) · nᵀΣn, with n the field normal at μ.
///
/// Positive values indicate risk mass inside obstacles; deeply free states
/// with small covariance approach −s(μ).
pub fn cvar_collision(state: &GaussianState, grid: &EsdfGrid, alpha: f64) -> Result<f64> {
    let mu = state.mean();
    let s = grid.query_sdf(mu)?;
    let n = grid.query_normal(mu)?;
    let sigma = state.covariance();
    let variance = (n.transpose() * sigma * n)[(0, 0)];
    Ok(-s + cvar_multiplier(alpha) * variance)
}

/// Hinge sum Σ_t max(0, CVaR(ξ[t]) − ε) over all trajectory states.
pub fn collision_cost(
    traj: &GaussianTrajectory,
    grid: &EsdfGrid,
    alpha: f64,
    epsilon: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for s in traj.states() {
        total += (cvar_collision(s, grid, alpha)? - epsilon).max(0.0);
    }
    Ok(total)
}

/// Cumulative Wasserstein-2 length Σ_t W2(ξ[t], ξ[t+1]).
pub fn transport_cost(traj: &GaussianTrajectory) -> f64 {
    traj.states()
        .windows(2)
        .map(|w| wasserstein2(&w[0], &w[1]))
        .sum()
}

/// Smoothness cost: extended states by finite differences, then
/// ½ Σ_t ‖Φ s_t − s_{t+1}‖²_{Q⁻¹}.
pub fn gp_cost(traj: &GaussianTrajectory, model: &GpModel) -> f64 {
    model.cost(traj)
}

/// C(ξ) = λ_obs·collision + λ_dis·transport + λ_gp·smoothness.
pub fn total_cost(
    traj: &GaussianTrajectory,
    grid: &EsdfGrid,
    weights: &CostWeights,
    model: &GpModel,
) -> Result<f64> {
    let mut total = 0.0;
    if weights.lambda_obs != 0.0 {
        total += weights.lambda_obs * collision_cost(traj, grid, weights.alpha, weights.epsilon)?;
    }
    if weights.lambda_dis != 0.0 {
        total += weights.lambda_dis * transport_cost(traj);
    }
    if weights.lambda_gp != 0.0 {
        total += weights.lambda_gp * gp_cost(traj, model);
    }
    Ok(total)
}

pub fn total_cost_batch(
    trajs: &[GaussianTrajectory],
    grid: &EsdfGrid,
    weights: &CostWeights,
    model: &GpModel,
) -> Result<Vec<f64>> {
    trajs
        .iter()
        .map(|t| total_cost(t, grid, weights, model))
        .collect()
}

/// Descent direction −Σᵢ λᵢ ∇cᵢ(ξ), one 5-vector [x, y, σx, σy, ρ] per node.
///
/// Transport and smoothness gradients are analytic. The collision gradient
/// is analytic through the risk expression with the field normal held fixed:
/// the normal is itself a stored gradient, so differentiating through it
/// would need field Hessians the grid does not carry.
pub fn cost_gradient(
    traj: &GaussianTrajectory,
    grid: &EsdfGrid,
    weights: &CostWeights,
    model: &GpModel,
) -> Result<Vec<[f64; 5]>> {
    let h = traj.len();
    let mut grad = vec![[0.0f64; 5]; h];
    if weights.lambda_obs != 0.0 {
        let g = collision_gradient(traj, grid, weights.alpha, weights.epsilon)?;
        for (acc, gi) in grad.iter_mut().zip(g) {
            for k in 0..5 {
                acc[k] += weights.lambda_obs * gi[k];
            }
        }
    }
    if weights.lambda_dis != 0.0 {
        let g = transport_gradient(traj);
        for (acc, gi) in grad.iter_mut().zip(g) {
            for k in 0..5 {
                acc[k] += weights.lambda_dis * gi[k];
            }
        }
    }
    if weights.lambda_gp != 0.0 {
        let g = model.gradient(traj);
        for (acc, gi) in grad.iter_mut().zip(g) {
            for k in 0..5 {
                acc[k] += weights.lambda_gp * gi[k];
            }
        }
    }
    for gi in grad.iter_mut() {
        for v in gi.iter_mut() {
            *v = -*v;
        }
    }
    Ok(grad)
}

pub fn cost_gradient_batch(
    trajs: &[GaussianTrajectory],
    grid: &EsdfGrid,
    weights: &CostWeights,
    model: &GpModel,
) -> Result<Vec<Vec<[f64; 5]>>> {
    trajs
        .iter()
        .map(|t| cost_gradient(t, grid, weights, model))
        .collect()
}

/// Per-node gradient of the collision hinge sum (frozen normals).
pub fn collision_gradient(
    traj: &GaussianTrajectory,
    grid: &EsdfGrid,
    alpha: f64,
    epsilon: f64,
) -> Result<Vec<[f64; 5]>> {
    let m = cvar_multiplier(alpha);
    let mut out = vec![[0.0f64; 5]; traj.len()];
    for (g, state) in out.iter_mut().zip(traj.states()) {
        let mu = state.mean();
        let s = grid.query_sdf(mu)?;
        let n = grid.query_normal(mu)?;
        let sigma = state.covariance();
        let variance = (n.transpose() * sigma * n)[(0, 0)];
        let cvar = -s + m * variance;
        if cvar - epsilon <= 0.0 {
            continue;
        }
        let (sx, sy, rho) = (state.sigma_x(), state.sigma_y(), state.rho());
        g[0] = -n.x;
        g[1] = -n.y;
        g[2] = m * (2.0 * n.x * n.x * sx + 2.0 * n.x * n.y * rho * sy);
        g[3] = m * (2.0 * n.y * n.y * sy + 2.0 * n.x * n.y * rho * sx);
        g[4] = m * 2.0 * n.x * n.y * sx * sy;
    }
    Ok(out)
}

/// Per-node gradient of the cumulative Wasserstein-2 length.
pub fn transport_gradient(traj: &GaussianTrajectory) -> Vec<[f64; 5]> {
    let h = traj.len();
    let mut out = vec![[0.0f64; 5]; h];
    for j in 0..h - 1 {
        let (ga, gb) = w2_pair_gradient(&traj.states()[j], &traj.states()[j + 1]);
        for k in 0..5 {
            out[j][k] += ga[k];
            out[j + 1][k] += gb[k];
        }
    }
    out
}

/// Gradients of W2(g1, g2) with respect to both states' 5 parameters.
///
/// Uses ∇_{Σ1} W2² = I − A(g1→g2) and ∇_{Σ2} W2² = I − A(g2→g1), chained
/// onto (σx, σy, ρ) through tr(G · ∂Σ/∂θ), then divided by 2·W2. Coincident
/// states are a kink of the square root; both gradients are zero there.
/// A covariance too ill-conditioned for the transport map (possible on raw
/// sampler output, where one width can sit on its floor while the other is
/// large) zeroes the shape part; the mean part never needs the map.
fn w2_pair_gradient(g1: &GaussianState, g2: &GaussianState) -> ([f64; 5], [f64; 5]) {
    let w2 = wasserstein2_sq(g1, g2).sqrt();
    if w2 < 1e-9 {
        return ([0.0; 5], [0.0; 5]);
    }
    let d_mu = g1.mean() - g2.mean();

    let shape = |state: &GaussianState, gmat: &Matrix2<f64>| -> [f64; 3] {
        let (sx, sy, rho) = (state.sigma_x(), state.sigma_y(), state.rho());
        let dsx = Matrix2::new(2.0 * sx, rho * sy, rho * sy, 0.0);
        let dsy = Matrix2::new(0.0, rho * sx, rho * sx, 2.0 * sy);
        let drho = Matrix2::new(0.0, sx * sy, sx * sy, 0.0);
        [
            (gmat * dsx).trace(),
            (gmat * dsy).trace(),
            (gmat * drho).trace(),
        ]
    };
    let maps = crate::gaussian::ot_map(g1, g2).and_then(|a12| {
        crate::gaussian::ot_map(g2, g1).map(|a21| (a12.matrix(), a21.matrix()))
    });
    let (s1, s2) = match maps {
        Ok((a12, a21)) => (
            shape(g1, &(Matrix2::identity() - a12)),
            shape(g2, &(Matrix2::identity() - a21)),
        ),
        Err(_) => ([0.0; 3], [0.0; 3]),
    };
    let scale = 1.0 / (2.0 * w2);
    (
        [
            2.0 * d_mu.x * scale,
            2.0 * d_mu.y * scale,
            s1[0] * scale,
            s1[1] * scale,
            s1[2] * scale,
        ],
        [
            -2.0 * d_mu.x * scale,
            -2.0 * d_mu.y * scale,
            s2[0] * scale,
            s2[1] * scale,
            s2[2] * scale,
        ],
    )
}
