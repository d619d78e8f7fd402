//! Forward-process variance schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COSINE_S: f64 = 0.008;
const BETA_MAX: f64 = 0.999;

/// Timesteps are 1-based: t runs over 1..=len().
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter("empty beta schedule".into()));
        }
        let mut prev = 0.0;
        for (i, &b) in betas.iter().enumerate() {
            if !b.is_finite() || b <= 0.0 || b >= 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "beta[{}] = {} outside (0, 1)",
                    i + 1,
                    b
                )));
            }
            if b < prev {
                return Err(Error::InvalidParameter(format!(
                    "beta schedule decreases at step {}",
                    i + 1
                )));
            }
            prev = b;
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Squared-cosine cumulative schedule with the standard small offset.
    pub fn cosine(t_steps: usize) -> Result<Self> {
        if t_steps < 2 {
            return Err(Error::InvalidParameter(
                "schedule needs at least 2 steps".into(),
            ));
        }
        let f = |t: f64| {
            let v = ((t / t_steps as f64 + COSINE_S) / (1.0 + COSINE_S)) * std::f64::consts::FRAC_PI_2;
            v.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(t_steps);
        let mut prev_bar = 1.0;
        for t in 1..=t_steps {
            let bar = f(t as f64) / f0;
            let beta = (1.0 - bar / prev_bar).clamp(1e-8, BETA_MAX);
            betas.push(beta);
            prev_bar = bar;
        }
        Self::from_betas(betas)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// ᾱ_{t−1}, defined as 1 for t = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Reverse-process posterior variance at step t (zero at t = 1).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}
