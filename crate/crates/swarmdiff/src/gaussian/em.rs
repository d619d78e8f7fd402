//! Expectation-maximization fitting and mixture sampling.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;

use super::{sym_eigenvalues, GaussianState, Gmm, EM_JITTER};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const MAX_ITERS: usize = 200;
const REL_TOL: f64 = 1e-9;

/// Fits a k-component mixture to 2D points. Deterministic for a fixed seed;
/// initialization is k-means++ driven by the seed.
pub fn fit_gmm_em(points: &[Vector2<f64>], k: usize, seed: u64) -> Result<Gmm> {
    fit_gmm_em_with_trace(points, k, seed).map(|(gmm, _)| gmm)
}

/// As `fit_gmm_em`, also returning the per-iteration log-likelihood trace.
pub fn fit_gmm_em_with_trace(
    points: &[Vector2<f64>],
    k: usize,
    seed: u64,
) -> Result<(Gmm, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidParameter("component count must be at least 1".into()));
    }
    if points.len() < 2 * k {
        return Err(Error::InvalidParameter(format!(
            "{} points cannot support {k} components (need at least {})",
            points.len(),
            2 * k
        )));
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::InvalidParameter("non-finite input point".into()));
    }

    let n = points.len();
    let centers = kmeanspp_centers(points, k, seed);

    // Initial parameters from a hard nearest-center partition.
    let mut assign = vec![0usize; n];
    for (i, p) in points.iter().enumerate() {
        let mut best = (f64::INFINITY, 0usize);
        for (c, ctr) in centers.iter().enumerate() {
            let d = (p - ctr).norm_squared();
            if d < best.0 {
                best = (d, c);
            }
        }
        assign[i] = best.1;
    }
    let mut weights = vec![0.0f64; k];
    let mut means = vec![Vector2::zeros(); k];
    let mut covs = vec![Matrix2::zeros(); k];
    for (i, p) in points.iter().enumerate() {
        weights[assign[i]] += 1.0;
        means[assign[i]] += p;
    }
    for c in 0..k {
        if weights[c] > 0.0 {
            means[c] /= weights[c];
        } else {
            means[c] = centers[c];
        }
    }
    for (i, p) in points.iter().enumerate() {
        let d = p - means[assign[i]];
        covs[assign[i]] += d * d.transpose();
    }
    for c in 0..k {
        if weights[c] > 0.0 {
            covs[c] /= weights[c];
        }
        covs[c] = floor_covariance(covs[c]);
        weights[c] = (weights[c] / n as f64).max(1e-12);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    let mut trace = Vec::new();
    let mut resp = vec![0.0f64; n * k];
    let mut last_ll = f64::NEG_INFINITY;
    for _ in 0..MAX_ITERS {
        // E-step in the log domain.
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut logs = vec![0.0f64; k];
            for c in 0..k {
                logs[c] = weights[c].ln() + log_pdf(p, &means[c], &covs[c]);
            }
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logs.iter().map(|l| (l - m).exp()).sum();
            ll += m + sum.ln();
            for c in 0..k {
                resp[i * k + c] = (logs[c] - m).exp() / sum;
            }
        }
        trace.push(ll);

        // M-step.
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < 1e-12 {
                // Dead component: keep its parameters, give it token mass.
                weights[c] = 1e-12;
                continue;
            }
            let mut mu = Vector2::zeros();
            for (i, p) in points.iter().enumerate() {
                mu += resp[i * k + c] * p;
            }
            mu /= nk;
            let mut cov = Matrix2::zeros();
            for (i, p) in points.iter().enumerate() {
                let d = p - mu;
                cov += resp[i * k + c] * d * d.transpose();
            }
            cov /= nk;
            means[c] = mu;
            covs[c] = floor_covariance(cov);
            weights[c] = nk / n as f64;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);

        if (ll - last_ll).abs() < REL_TOL * (1.0 + ll.abs()) {
            break;
        }
        last_ll = ll;
    }

    let components = (0..k)
        .map(|c| GaussianState::from_covariance(means[c], covs[c]))
        .collect::<Result<Vec<_>>>()?;
    let gmm = Gmm::new(components, weights)?;
    Ok((gmm, trace))
}

/// Raises the smallest covariance eigenvalue to the jitter floor, leaving
/// healthy covariances untouched so exact EM monotonicity holds for them.
fn floor_covariance(cov: Matrix2<f64>) -> Matrix2<f64> {
    let sym = (cov + cov.transpose()) / 2.0;
    let (lo, _) = sym_eigenvalues(&sym);
    if lo < EM_JITTER {
        sym + Matrix2::identity() * (EM_JITTER - lo)
    } else {
        sym
    }
}

fn log_pdf(p: &Vector2<f64>, mu: &Vector2<f64>, cov: &Matrix2<f64>) -> f64 {
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let d = p - mu;
    let q = (d.transpose() * inv * d)[(0, 0)];
    -(q / 2.0) - (std::f64::consts::TAU).ln() - det.ln() / 2.0
}

fn kmeanspp_centers(points: &[Vector2<f64>], k: usize, seed: u64) -> Vec<Vector2<f64>> {
    let mut rng = stream_rng(seed, Stream::Em, 0);
    let n = points.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..n)]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p - centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        let c = points[idx];
        centers.push(c);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min((p - c).norm_squared());
        }
    }
    centers
}

/// Draws `n` points from the mixture: a weight-proportional component pick,
/// then a Cholesky-transformed standard normal.
pub fn sample_gmm(gmm: &Gmm, n: usize, seed: u64) -> Vec<Vector2<f64>> {
    let mut rng = stream_rng(seed, Stream::Generic, 1);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut target: f64 = rng.gen_range(0.0..1.0);
        let mut idx = gmm.len() - 1;
        for (c, &w) in gmm.weights().iter().enumerate() {
            if target < w {
                idx = c;
                break;
            }
            target -= w;
        }
        let g = &gmm.components()[idx];
        let z = Vector2::new(standard_normal(&mut rng), standard_normal(&mut rng));
        out.push(g.mean() + g.cholesky_lower() * z);
    }
    out
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}
