//! Constant-velocity smoothness prior over an extended 10-dim state.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::gaussian::GaussianState;

use super::GaussianTrajectory;

type Mat10 = SMatrix<f64, 10, 10>;
type Vec10 = SVector<f64, 10>;

/// Extended-state layout: [x, y, ẋ, ẏ, σx, σy, ρ, σ̇x, σ̇y, ρ̇].
/// (value index, derivative index, trajectory parameter index) per channel.
const CHANNELS: [(usize, usize, usize); 5] =
    [(0, 2, 0), (1, 3, 1), (4, 7, 2), (5, 8, 3), (6, 9, 4)];

/// One-step transition Φ and process noise Q of the smoothness prior.
///
/// Φ is constant-velocity integration per channel; Q is block-diagonal
/// white-noise-on-acceleration with spectral density `q_pos` on the two
/// position channels and `q_shape` on the three shape channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    dt: f64,
    q_pos: f64,
    q_shape: f64,
    phi: Mat10,
    q_inv: Mat10,
}

impl GpModel {
    pub fn new(dt: f64, q_pos: f64, q_shape: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if !(q_pos > 0.0) || !(q_shape > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "spectral densities must be positive, got q_pos={q_pos}, q_shape={q_shape}"
            )));
        }
        let mut phi = Mat10::identity();
        let mut q_inv = Mat10::zeros();
        for &(v, d, p) in &CHANNELS {
            phi[(v, d)] = dt;
            let q = if p < 2 { q_pos } else { q_shape };
            // Inverse of q·[[dt³/3, dt²/2], [dt²/2, dt]] in closed form.
            let k = 12.0 / (q * dt.powi(4));
            q_inv[(v, v)] = k * dt;
            q_inv[(v, d)] = k * (-dt * dt / 2.0);
            q_inv[(d, v)] = k * (-dt * dt / 2.0);
            q_inv[(d, d)] = k * (dt.powi(3) / 3.0);
        }
        Ok(Self {
            dt,
            q_pos,
            q_shape,
            phi,
            q_inv,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn q_pos(&self) -> f64 {
        self.q_pos
    }

    pub fn q_shape(&self) -> f64 {
        self.q_shape
    }

    pub fn transition(&self) -> &Mat10 {
        &self.phi
    }

    /// Reconstructs Q from the stored closed-form inverse.
    pub fn process_noise(&self) -> Mat10 {
        self.q_inv.try_inverse().expect("Q^{-1} is SPD by construction")
    }

    /// Lifts the 5-parameter nodes to extended states: derivative entries by
    /// central differences inside, one-sided at the ends.
    pub fn lift(&self, traj: &GaussianTrajectory) -> Vec<Vec10> {
        let states = traj.states();
        let h = states.len();
        let dt = traj.dt();
        let value = |s: &GaussianState| [s.x(), s.y(), s.sigma_x(), s.sigma_y(), s.rho()];
        let mut out = vec![Vec10::zeros(); h];
        for t in 0..h {
            let v = value(&states[t]);
            let (prev, next, denom) = if t == 0 {
                (value(&states[0]), value(&states[1]), dt)
            } else if t == h - 1 {
                (value(&states[h - 2]), value(&states[h - 1]), dt)
            } else {
                (value(&states[t - 1]), value(&states[t + 1]), 2.0 * dt)
            };
            for (c, &(vi, di, pi)) in CHANNELS.iter().enumerate() {
                let _ = c;
                out[t][vi] = v[pi];
                out[t][di] = (next[pi] - prev[pi]) / denom;
            }
        }
        out
    }

    /// ½ Σ_t ‖Φ s_t − s_{t+1}‖²_{Q⁻¹} over consecutive extended states.
    pub fn cost(&self, traj: &GaussianTrajectory) -> f64 {
        let s = self.lift(traj);
        let mut total = 0.0;
        for t in 0..s.len() - 1 {
            let r = self.phi * s[t] - s[t + 1];
            total += 0.5 * (r.transpose() * self.q_inv * r)[(0, 0)];
        }
        total
    }

    /// Analytic gradient with respect to the 5 parameters of every node:
    /// residual adjoint through Φ, then through the finite-difference lift.
    pub fn gradient(&self, traj: &GaussianTrajectory) -> Vec<[f64; 5]> {
        let s = self.lift(traj);
        let h = s.len();
        let dt = traj.dt();
        let mut grad_s = vec![Vec10::zeros(); h];
        for t in 0..h - 1 {
            let r = self.phi * s[t] - s[t + 1];
            let qr = self.q_inv * r;
            grad_s[t] += self.phi.transpose() * qr;
            grad_s[t + 1] -= qr;
        }
        let mut out = vec![[0.0f64; 5]; h];
        for t in 0..h {
            for &(vi, di, pi) in &CHANNELS {
                out[t][pi] += grad_s[t][vi];
                let gd = grad_s[t][di];
                if t == 0 {
                    out[1][pi] += gd / dt;
                    out[0][pi] -= gd / dt;
                } else if t == h - 1 {
                    out[h - 1][pi] += gd / dt;
                    out[h - 2][pi] -= gd / dt;
                } else {
                    out[t + 1][pi] += gd / (2.0 * dt);
                    out[t - 1][pi] -= gd / (2.0 * dt);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianState;

    fn constant_velocity(h: usize, dt: f64) -> GaussianTrajectory {
        let states = (0..h)
            .map(|t| GaussianState::new(1.0 + 0.7 * t as f64 * dt, 2.0 - 0.3 * t as f64 * dt, 0.8, 0.6, 0.1))
            .collect();
        GaussianTrajectory::new(states, dt).unwrap()
    }

    #[test]
    fn transition_is_constant_velocity() {
        let m = GpModel::new(0.25, 1.0, 1.0).unwrap();
        let phi = m.transition();
        let mut s = Vec10::zeros();
        s[0] = 3.0;
        s[2] = 2.0;
        let next = phi * s;
        assert_eq!(next[0], 3.0 + 0.25 * 2.0);
        assert_eq!(next[2], 2.0);
    }

    #[test]
    fn process_noise_spd_and_inverse_consistent() {
        let m = GpModel::new(0.5, 2.0, 0.7).unwrap();
        let q = m.process_noise();
        // Q·Q⁻¹ = I.
        let prod = q * m.q_inv;
        assert!((prod - Mat10::identity()).norm() < 1e-9);
        let chol = nalgebra::Cholesky::new(q);
        assert!(chol.is_some(), "Q must be SPD");
    }

    #[test]
    fn constant_velocity_costs_zero() {
        let m = GpModel::new(0.25, 1.0, 1.0).unwrap();
        let traj = constant_velocity(12, 0.25);
        assert!(m.cost(&traj) < 1e-12);
        for g in m.gradient(&traj) {
            for v in g {
                assert!(v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn displacement_monotone() {
        let m = GpModel::new(0.25, 1.0, 1.0).unwrap();
        let base = constant_velocity(9, 0.25);
        let mut last = 0.0;
        for delta in [0.1, 0.2, 0.4] {
            let mut states = base.states().to_vec();
            let mid = states[4];
            states[4] = GaussianState::new(mid.x(), mid.y() + delta, mid.sigma_x(), mid.sigma_y(), mid.rho());
            let traj = GaussianTrajectory::new(states, 0.25).unwrap();
            let c = m.cost(&traj);
            assert!(c > last, "cost not increasing at delta={delta}");
            last = c;
        }
    }

    #[test]
    fn quadratic_form_scales_inversely_with_q() {
        let m1 = GpModel::new(0.25, 1.0, 0.5).unwrap();
        let m4 = GpModel::new(0.25, 4.0, 2.0).unwrap();
        let mut states = constant_velocity(7, 0.25).states().to_vec();
        let s = states[3];
        states[3] = GaussianState::new(s.x() + 0.3, s.y(), s.sigma_x() + 0.2, s.sigma_y(), s.rho() - 0.1);
        let traj = GaussianTrajectory::new(states, 0.25).unwrap();
        let (c1, c4) = (m1.cost(&traj), m4.cost(&traj));
        assert!(c1 > 0.0);
        assert!((c1 / c4 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn zero_cost_iff_transition_satisfied() {
        let m = GpModel::new(0.5, 1.0, 1.0).unwrap();
        // A trajectory with varying shape violates the model.
        let states: Vec<GaussianState> = (0..6)
            .map(|t| GaussianState::new(t as f64, 0.0, 0.5 + 0.1 * (t as f64).powi(2), 0.5, 0.0))
            .collect();
        let traj = GaussianTrajectory::new(states, 0.5).unwrap();
        assert!(m.cost(&traj) > 1e-6);
    }
}
