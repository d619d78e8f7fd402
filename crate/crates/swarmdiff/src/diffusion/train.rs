//! Noise-prediction training loop.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::costs::GaussianTrajectory;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

use super::context::{Context, NormStats};
use super::net::{self, Arch, DenoiserParams, NODE_DIM};
use super::schedule::NoiseSchedule;
use super::{forward_diffuse_with, DiffusionModel};

pub const SW_PROJECTIONS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    SlicedWasserstein,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub t_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_dim: 128,
            n_heads: 4,
            n_layers: 6,
            t_steps: 100,
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            loss: LossKind::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.t_steps < 2 {
            problems.push("t_steps must be at least 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }
}

/// One training record: a raw trajectory plus its conditioning.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub traj: GaussianTrajectory,
    pub ctx: Context,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Step at which a non-finite loss or activation stopped training. The
    /// returned weights are from the last finite step.
    pub diverged_at: Option<usize>,
}

impl TrainReport {
    /// Trailing moving average; entry k averages the `window` most recent
    /// losses ending at k. Starts at index window−1.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.losses.len() < window {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.losses.len() - window + 1);
        let mut acc: f64 = self.losses[..window].iter().sum();
        out.push(acc / window as f64);
        for k in window..self.losses.len() {
            acc += self.losses[k] - self.losses[k - window];
            out.push(acc / window as f64);
        }
        out
    }
}

struct Adam {
    m: DenoiserParams,
    v: DenoiserParams,
    t: usize,
    lr: f64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &DenoiserParams, lr: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut DenoiserParams, grads: &DenoiserParams) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_B1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_B2.powi(self.t as i32);
        let gts = grads.tensors();
        let mut pts = params.tensors_mut();
        let mut mts = self.m.tensors_mut();
        let mut vts = self.v.tensors_mut();
        for i in 0..pts.len() {
            let g = gts[i].1.as_slice().unwrap();
            let p = pts[i].1.as_slice_mut().unwrap();
            let m = mts[i].1.as_slice_mut().unwrap();
            let v = vts[i].1.as_slice_mut().unwrap();
            for j in 0..p.len() {
                m[j] = ADAM_B1 * m[j] + (1.0 - ADAM_B1) * g[j];
                v[j] = ADAM_B2 * v[j] + (1.0 - ADAM_B2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Mean squared error over all entries; returns the loss and its gradient
/// with respect to the prediction.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let grad = diff.mapv(|v| 2.0 * v / n);
    (loss, grad)
}

/// Sliced Wasserstein-2 distance between the prediction's rows and the
/// target's rows, averaged over random unit directions: project both sets,
/// sort, and take the mean squared gap between order statistics.
pub fn sliced_wasserstein_loss(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> (f64, Array2<f64>) {
    let h = pred.nrows();
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    for _ in 0..SW_PROJECTIONS {
        let mut u = [0.0f64; NODE_DIM];
        loop {
            for v in u.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-9 {
                for v in u.iter_mut() {
                    *v /= n;
                }
                break;
            }
        }
        let proj = |m: &Array2<f64>, i: usize| (0..NODE_DIM).map(|d| m[(i, d)] * u[d]).sum::<f64>();
        let mut a: Vec<(f64, usize)> = (0..h).map(|i| (proj(pred, i), i)).collect();
        let mut b: Vec<f64> = (0..h).map(|i| proj(target, i)).collect();
        a.sort_by(|x, y| x.0.total_cmp(&y.0));
        b.sort_by(f64::total_cmp);
        for (r, &(av, ai)) in a.iter().enumerate() {
            let gap = av - b[r];
            loss += gap * gap / h as f64;
            let coef = 2.0 * gap / h as f64;
            for d in 0..NODE_DIM {
                grad[(ai, d)] += coef * u[d];
            }
        }
    }
    let p = SW_PROJECTIONS as f64;
    (loss / p, grad.mapv(|v: f64| v / p))
}

/// Fits normalization, trains a fresh denoiser with Adam, and returns the
/// packaged model with the per-step loss curve.
///
/// A non-finite loss or activation stops training; the weights from before
/// the offending step are returned and the report records the step index.
pub fn train(
    samples: &[TrainSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(DiffusionModel, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidParameter(
            "training dataset is empty".into(),
        ));
    }
    let h = samples[0].traj.len();
    let dt = samples[0].traj.dt();
    let env_len = samples[0].ctx.env.len();
    for (i, s) in samples.iter().enumerate() {
        if s.traj.len() != h {
            return Err(Error::InvalidParameter(format!(
                "sample {i} has horizon {} but sample 0 has {h}",
                s.traj.len()
            )));
        }
        if s.traj.dt() != dt {
            return Err(Error::InvalidParameter(format!(
                "sample {i} has dt {} but sample 0 has {dt}",
                s.traj.dt()
            )));
        }
        if s.ctx.env.len() != env_len {
            return Err(Error::InvalidParameter(format!(
                "sample {i} has {} environment features but sample 0 has {env_len}",
                s.ctx.env.len()
            )));
        }
    }

    let trajs: Vec<Vec<crate::gaussian::GaussianState>> =
        samples.iter().map(|s| s.traj.states().to_vec()).collect();
    let envs: Vec<Vec<f64>> = samples.iter().map(|s| s.ctx.env.clone()).collect();
    let norm = NormStats::fit(&trajs, &envs)?;

    let zs: Vec<Array2<f64>> = trajs.iter().map(|t| norm.encode_trajectory(t)).collect();
    let ctxs: Vec<Array1<f64>> = samples
        .iter()
        .map(|s| norm.encode_context(&s.ctx))
        .collect::<Result<_>>()?;

    let schedule = NoiseSchedule::cosine(cfg.t_steps)?;
    let arch = Arch {
        model_dim: cfg.model_dim,
        n_heads: cfg.n_heads,
        n_layers: cfg.n_layers,
        ctx_dim: norm.context_dim(),
    };
    let mut params = DenoiserParams::init(arch, seed)?;
    let mut adam = Adam::new(&params, cfg.lr);

    let n = samples.len();
    let t_max = schedule.len();
    let mut batch_rng = stream_rng(seed, Stream::TrainBatch, 0);
    let mut noise_rng = stream_rng(seed, Stream::TrainNoise, 0);
    let mut proj_rng = stream_rng(seed, Stream::Generic, 2);

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;

    'steps: for step in 0..cfg.steps {
        let mut grads = params.zeros_like();
        let mut loss_acc = 0.0;
        let inv_b = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let i = batch_rng.gen_range(0..n);
            let t = batch_rng.gen_range(1..=t_max);
            let (noisy, eps) = forward_diffuse_with(&zs[i], t, &schedule, &mut noise_rng);
            let (eps_hat, cache) = match net::forward(&params, &noisy, t, &ctxs[i]) {
                Ok(v) => v,
                Err(Error::NonFiniteActivation { .. }) => {
                    diverged_at = Some(step);
                    break 'steps;
                }
                Err(e) => return Err(e),
            };
            let (l, dpred) = match cfg.loss {
                LossKind::Mse => mse_loss(&eps_hat, &eps),
                LossKind::SlicedWasserstein => {
                    sliced_wasserstein_loss(&eps_hat, &eps, &mut proj_rng)
                }
            };
            loss_acc += l * inv_b;
            net::backward(&params, &cache, &dpred.mapv(|v| v * inv_b), &mut grads);
        }
        if !loss_acc.is_finite() {
            diverged_at = Some(step);
            break;
        }
        losses.push(loss_acc);
        adam.step(&mut params, &grads);
    }

    Ok((
        DiffusionModel {
            params,
            schedule,
            norm,
            trained_h: h,
            dt,
        },
        TrainReport {
            losses,
            diverged_at,
        },
    ))
}
