//! Conditioning inputs and the normalization applied to trajectories before
//! they reach the denoiser.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianState;
use crate::geom::{EsdfGrid, Point};

use super::net::NODE_DIM;

/// Number of probe points along the start-goal chord.
pub const CHORD_SAMPLES: usize = 8;
/// Features per chord probe: signed distance plus the outward normal.
const PER_PROBE: usize = 3;
/// Pooled features appended after the chord: mean and min signed distance
/// over the grid nodes.
const POOLED: usize = 2;

pub const ENV_FEATURES: usize = CHORD_SAMPLES * PER_PROBE + POOLED;

/// Everything the denoiser is conditioned on besides the timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub start: GaussianState,
    pub goal: GaussianState,
    pub env: Vec<f64>,
}

impl Context {
    pub fn new(start: GaussianState, goal: GaussianState, grid: &EsdfGrid) -> Result<Self> {
        let env = env_features(&start.mean(), &goal.mean(), grid)?;
        Ok(Self { start, goal, env })
    }

    pub fn with_env(start: GaussianState, goal: GaussianState, env: Vec<f64>) -> Result<Self> {
        if env.len() != ENV_FEATURES {
            return Err(Error::InvalidParameter(format!(
                "expected {} environment features, got {}",
                ENV_FEATURES,
                env.len()
            )));
        }
        Ok(Self { start, goal, env })
    }
}

/// Fixed-length scene descriptor: signed distance and normal at evenly spaced
/// points on the start-goal segment, then pooled distance statistics.
pub fn env_features(start: &Point, goal: &Point, grid: &EsdfGrid) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ENV_FEATURES);
    for i in 0..CHORD_SAMPLES {
        let s = i as f64 / (CHORD_SAMPLES - 1) as f64;
        let p = start + (goal - start) * s;
        let d = grid.query_sdf(p)?;
        let n = grid.query_normal(p)?;
        out.push(d);
        out.push(n.x);
        out.push(n.y);
    }
    let (mean, min) = grid.pooled_sdf_stats();
    out.push(mean);
    out.push(min);
    Ok(out)
}

/// Per-dimension affine normalization fitted on training data, applied after
/// mapping widths through log and correlation through atanh so every channel
/// is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; NODE_DIM],
    pub std: [f64; NODE_DIM],
    pub env_mean: Vec<f64>,
    pub env_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-6;

fn to_unbounded(state: &GaussianState) -> [f64; NODE_DIM] {
    [
        state.x(),
        state.y(),
        state.sigma_x().ln(),
        state.sigma_y().ln(),
        state.rho().atanh(),
    ]
}

fn from_unbounded(v: [f64; NODE_DIM]) -> GaussianState {
    GaussianState::new(v[0], v[1], v[2].exp(), v[3].exp(), v[4].tanh())
}

impl NormStats {
    /// Fit from raw trajectories (each H×5 as states) and their environment
    /// feature vectors.
    pub fn fit(trajectories: &[Vec<GaussianState>], envs: &[Vec<f64>]) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::InvalidParameter(
                "cannot fit normalization on an empty dataset".into(),
            ));
        }
        let mut sum = [0.0; NODE_DIM];
        let mut sq = [0.0; NODE_DIM];
        let mut n = 0.0;
        for traj in trajectories {
            for st in traj {
                let u = to_unbounded(st);
                for d in 0..NODE_DIM {
                    sum[d] += u[d];
                    sq[d] += u[d] * u[d];
                }
                n += 1.0;
            }
        }
        let mut mean = [0.0; NODE_DIM];
        let mut std = [0.0; NODE_DIM];
        for d in 0..NODE_DIM {
            mean[d] = sum[d] / n;
            std[d] = ((sq[d] / n - mean[d] * mean[d]).max(0.0)).sqrt().max(STD_FLOOR);
        }

        let env_len = envs.first().map_or(0, |e| e.len());
        let mut env_mean = vec![0.0; env_len];
        let mut env_sq = vec![0.0; env_len];
        for e in envs {
            if e.len() != env_len {
                return Err(Error::InvalidParameter(
                    "inconsistent environment feature lengths".into(),
                ));
            }
            for (i, &v) in e.iter().enumerate() {
                env_mean[i] += v;
                env_sq[i] += v * v;
            }
        }
        let m = envs.len().max(1) as f64;
        let mut env_std = vec![1.0; env_len];
        for i in 0..env_len {
            env_mean[i] /= m;
            env_std[i] = ((env_sq[i] / m - env_mean[i] * env_mean[i]).max(0.0))
                .sqrt()
                .max(STD_FLOOR);
        }
        Ok(Self {
            mean,
            std,
            env_mean,
            env_std,
        })
    }

    /// Map one state into the normalized coordinates the denoiser sees.
    pub fn encode_state(&self, state: &GaussianState) -> [f64; NODE_DIM] {
        let u = to_unbounded(state);
        let mut z = [0.0; NODE_DIM];
        for d in 0..NODE_DIM {
            z[d] = (u[d] - self.mean[d]) / self.std[d];
        }
        z
    }

    pub fn decode_state(&self, z: &[f64; NODE_DIM]) -> GaussianState {
        let mut u = [0.0; NODE_DIM];
        for d in 0..NODE_DIM {
            u[d] = z[d] * self.std[d] + self.mean[d];
        }
        from_unbounded(u)
    }

    pub fn encode_trajectory(&self, states: &[GaussianState]) -> Array2<f64> {
        let mut out = Array2::zeros((states.len(), NODE_DIM));
        for (i, st) in states.iter().enumerate() {
            let z = self.encode_state(st);
            for d in 0..NODE_DIM {
                out[(i, d)] = z[d];
            }
        }
        out
    }

    pub fn decode_trajectory(&self, z: &Array2<f64>) -> Vec<GaussianState> {
        (0..z.nrows())
            .map(|i| {
                let row = [z[(i, 0)], z[(i, 1)], z[(i, 2)], z[(i, 3)], z[(i, 4)]];
                self.decode_state(&row)
            })
            .collect()
    }

    /// Full conditioning vector: normalized start, normalized goal, then the
    /// standardized environment features.
    pub fn encode_context(&self, ctx: &Context) -> Result<Array1<f64>> {
        if ctx.env.len() != self.env_mean.len() {
            return Err(Error::InvalidParameter(format!(
                "context has {} environment features, stats expect {}",
                ctx.env.len(),
                self.env_mean.len()
            )));
        }
        let mut v = Vec::with_capacity(2 * NODE_DIM + ctx.env.len());
        v.extend_from_slice(&self.encode_state(&ctx.start));
        v.extend_from_slice(&self.encode_state(&ctx.goal));
        for (i, &e) in ctx.env.iter().enumerate() {
            v.push((e - self.env_mean[i]) / self.env_std[i]);
        }
        Ok(Array1::from_vec(v))
    }

    pub fn context_dim(&self) -> usize {
        2 * NODE_DIM + self.env_mean.len()
    }
}
