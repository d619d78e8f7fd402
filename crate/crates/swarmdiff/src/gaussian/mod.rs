//! Gaussian and mixture state algebra: the 5-parameter node representation,
//! closed-form Wasserstein-2 geometry, and optimal-transport maps.

mod em;

pub use em::{fit_gmm_em, fit_gmm_em_with_trace, sample_gmm};

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RHO_BOUND: f64 = 1.0 - 1e-6;
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Diagonal covariance floor applied by EM when a component collapses.
pub const EM_JITTER: f64 = 1e-6;

/// Spatial Gaussian distribution parameterized as [x, y, σx, σy, ρ].
///
/// Construction clamps σ to at least `SIGMA_FLOOR` and |ρ| to at most
/// `RHO_BOUND`, so the implied covariance is always positive definite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct GaussianState {
    x: f64,
    y: f64,
    sigma_x: f64,
    sigma_y: f64,
    rho: f64,
}

impl GaussianState {
    pub fn new(x: f64, y: f64, sigma_x: f64, sigma_y: f64, rho: f64) -> Self {
        Self {
            x,
            y,
            sigma_x: sigma_x.max(SIGMA_FLOOR),
            sigma_y: sigma_y.max(SIGMA_FLOOR),
            rho: rho.clamp(-RHO_BOUND, RHO_BOUND),
        }
    }

    pub fn isotropic(x: f64, y: f64, sigma: f64) -> Self {
        Self::new(x, y, sigma, sigma, 0.0)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn mean(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn covariance(&self) -> Matrix2<f64> {
        let off = self.rho * self.sigma_x * self.sigma_y;
        Matrix2::new(
            self.sigma_x * self.sigma_x,
            off,
            off,
            self.sigma_y * self.sigma_y,
        )
    }

    /// Lower Cholesky factor of the covariance.
    pub fn cholesky_lower(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.sigma_x,
            0.0,
            self.rho * self.sigma_y,
            self.sigma_y * (1.0 - self.rho * self.rho).sqrt(),
        )
    }

    pub fn from_covariance(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        let sym = (cov[(0, 1)] - cov[(1, 0)]).abs();
        if sym > 1e-9 * (1.0 + cov.norm()) {
            return Err(Error::Geometry(format!(
                "covariance asymmetry {sym:.3e} exceeds tolerance"
            )));
        }
        let (lo, _hi) = sym_eigenvalues(&cov);
        if lo <= 0.0 {
            return Err(Error::NotSpd { min_eig: lo });
        }
        let sx = cov[(0, 0)].sqrt();
        let sy = cov[(1, 1)].sqrt();
        let rho = cov[(0, 1)] / (sx * sy);
        Ok(Self::new(mean.x, mean.y, sx, sy, rho))
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.sigma_x, self.sigma_y, self.rho]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    /// Density at `p`.
    pub fn pdf(&self, p: Vector2<f64>) -> f64 {
        let det = self.sigma_x * self.sigma_x * self.sigma_y * self.sigma_y
            * (1.0 - self.rho * self.rho);
        let d = p - self.mean();
        let zx = d.x / self.sigma_x;
        let zy = d.y / self.sigma_y;
        let q = (zx * zx - 2.0 * self.rho * zx * zy + zy * zy) / (1.0 - self.rho * self.rho);
        (-(q / 2.0)).exp() / (std::f64::consts::TAU * det.sqrt())
    }
}

impl From<[f64; 5]> for GaussianState {
    fn from(a: [f64; 5]) -> Self {
        Self::from_array(a)
    }
}

impl From<GaussianState> for [f64; 5] {
    fn from(g: GaussianState) -> Self {
        g.to_array()
    }
}

/// Trajectory of Gaussian states at consecutive time indices.
pub type GaussTrajectory = Vec<GaussianState>;

/// Affine map T(p) = A p + b transporting one Gaussian onto another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl AffineMap {
    pub fn identity() -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            b: [0.0, 0.0],
        }
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.a[0][0], self.a[0][1], self.a[1][0], self.a[1][1])
    }

    pub fn apply(&self, p: Vector2<f64>) -> Vector2<f64> {
        self.matrix() * p + Vector2::new(self.b[0], self.b[1])
    }
}

/// Eigenvalues of a symmetric 2×2 matrix, ascending.
pub(crate) fn sym_eigenvalues(m: &Matrix2<f64>) -> (f64, f64) {
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    (tr / 2.0 - disc, tr / 2.0 + disc)
}

/// Principal square root of a symmetric positive definite 2×2 matrix using
/// the closed form S = (M + √det(M)·I) / √(tr(M) + 2√det(M)).
pub fn spd_sqrt(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let asym = (m[(0, 1)] - m[(1, 0)]).abs();
    if asym > 1e-9 * (1.0 + m.norm()) {
        return Err(Error::Geometry(format!(
            "spd_sqrt input asymmetry {asym:.3e} exceeds tolerance"
        )));
    }
    let (lo, _) = sym_eigenvalues(m);
    if lo <= 0.0 {
        return Err(Error::NotSpd { min_eig: lo });
    }
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let s = det.sqrt();
    let t = (m[(0, 0)] + m[(1, 1)] + 2.0 * s).sqrt();
    Ok((m + Matrix2::identity() * s) / t)
}

/// Squared 2-Wasserstein distance between Gaussians:
/// ‖μ1−μ2‖² + tr(Σ1 + Σ2 − 2(Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2}).
pub fn wasserstein2_sq(g1: &GaussianState, g2: &GaussianState) -> f64 {
    let s1 = g1.covariance();
    let s2 = g2.covariance();
    let mean_term = (g1.mean() - g2.mean()).norm_squared();
    let r1 = spd_sqrt(&s1).expect("state covariance is SPD by construction");
    let cross = spd_sqrt(&(r1 * s2 * r1)).expect("congruence preserves SPD");
    let bures = (s1.trace() + s2.trace() - 2.0 * cross.trace()).max(0.0);
    mean_term + bures
}

pub fn wasserstein2(g1: &GaussianState, g2: &GaussianState) -> f64 {
    wasserstein2_sq(g1, g2).sqrt()
}

/// Optimal-transport map from g1 to g2:
/// A = Σ1^{-1/2} (Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2} Σ1^{-1/2}, b = μ2 − A μ1.
pub fn ot_map(g1: &GaussianState, g2: &GaussianState) -> Result<AffineMap> {
    let s1 = g1.covariance();
    let (lo, hi) = sym_eigenvalues(&s1);
    if lo <= 0.0 {
        return Err(Error::NotSpd { min_eig: lo });
    }
    let cond = hi / lo;
    if cond > 1e8 {
        return Err(Error::IllConditioned { cond });
    }
    let r1 = spd_sqrt(&s1)?;
    let r1_inv = r1
        .try_inverse()
        .ok_or(Error::IllConditioned { cond })?;
    let mid = spd_sqrt(&(r1 * g2.covariance() * r1))?;
    let a = r1_inv * mid * r1_inv;
    let b = g2.mean() - a * g1.mean();
    Ok(AffineMap {
        a: [[a[(0, 0)], a[(0, 1)]], [a[(1, 0)], a[(1, 1)]]],
        b: [b.x, b.y],
    })
}

/// Finite mixture of spatial Gaussians with normalized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRepr", into = "GmmRepr")]
pub struct Gmm {
    components: Vec<GaussianState>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GmmRepr {
    weights: Vec<f64>,
    components: Vec<[f64; 5]>,
}

impl Gmm {
    pub fn new(components: Vec<GaussianState>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        if components.len() != weights.len() {
            return Err(Error::InvalidParameter(format!(
                "{} components but {} weights",
                components.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            components,
            weights,
        })
    }

    pub fn uniform(components: Vec<GaussianState>) -> Result<Self> {
        let k = components.len();
        Self::new(components, vec![1.0 / k as f64; k])
    }

    pub fn components(&self) -> &[GaussianState] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn pdf(&self, p: Vector2<f64>) -> f64 {
        self.components
            .iter()
            .zip(&self.weights)
            .map(|(g, w)| w * g.pdf(p))
            .sum()
    }
}

impl TryFrom<GmmRepr> for Gmm {
    type Error = Error;
    fn try_from(r: GmmRepr) -> Result<Self> {
        Gmm::new(
            r.components.into_iter().map(GaussianState::from_array).collect(),
            r.weights,
        )
    }
}

impl From<Gmm> for GmmRepr {
    fn from(g: Gmm) -> Self {
        GmmRepr {
            weights: g.weights,
            components: g.components.iter().map(|c| c.to_array()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn construction_clamps_bounds() {
        let g = GaussianState::new(0.0, 0.0, -1.0, 0.0, 2.0);
        assert_eq!(g.sigma_x(), SIGMA_FLOOR);
        assert_eq!(g.sigma_y(), SIGMA_FLOOR);
        assert_eq!(g.rho(), RHO_BOUND);
    }

    #[test]
    fn covariance_round_trip() {
        let g = GaussianState::new(1.5, -2.0, 2.0, 0.5, -0.3);
        let back = GaussianState::from_covariance(g.mean(), g.covariance()).unwrap();
        for (a, b) in g.to_array().iter().zip(back.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn from_covariance_rejects_non_spd() {
        let m = Matrix2::new(1.0, 2.0, 2.0, 1.0);
        assert!(matches!(
            GaussianState::from_covariance(Vector2::zeros(), m),
            Err(Error::NotSpd { .. })
        ));
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let i = Matrix2::identity();
        assert!((spd_sqrt(&i).unwrap() - i).norm() < 1e-12);
        let d = Matrix2::new(4.0, 0.0, 0.0, 9.0);
        let s = spd_sqrt(&d).unwrap();
        assert!((s - Matrix2::new(2.0, 0.0, 0.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn sqrt_multiply_back() {
        let mut rng = crate::rng::stream_rng(42, crate::rng::Stream::Generic, 0);
        for _ in 0..500 {
            let a = rng.gen_range(0.2..3.0);
            let b = rng.gen_range(0.2..3.0);
            let r: f64 = rng.gen_range(-0.95..0.95);
            let m = Matrix2::new(a * a, r * a * b, r * a * b, b * b);
            let s = spd_sqrt(&m).unwrap();
            assert!((s * s - m).norm() < 1e-9, "{m:?}");
            assert!((s - s.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn w2_reference_values() {
        let a = GaussianState::isotropic(0.0, 0.0, 1.0);
        assert_eq!(wasserstein2(&a, &a), 0.0);
        let b = GaussianState::isotropic(3.0, 4.0, 1.0);
        assert!((wasserstein2(&a, &b) - 5.0).abs() < 1e-12);
        let c = GaussianState::new(0.0, 0.0, 2.0, 1.0, 0.0);
        // Diagonal reduction: (2-1)^2 + (1-1)^2 = 1.
        assert!((wasserstein2(&a, &c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn w2_axioms() {
        let mut rng = crate::rng::stream_rng(7, crate::rng::Stream::Generic, 1);
        let mut random_state = |rng: &mut rand_chacha::ChaCha8Rng| {
            GaussianState::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
                rng.gen_range(-0.9..0.9),
            )
        };
        for _ in 0..1000 {
            let (a, b, c) = (
                random_state(&mut rng),
                random_state(&mut rng),
                random_state(&mut rng),
            );
            let ab = wasserstein2(&a, &b);
            let ba = wasserstein2(&b, &a);
            assert!((ab - ba).abs() < 1e-9);
            assert!(ab >= 0.0);
            let ac = wasserstein2(&a, &c);
            let cb = wasserstein2(&c, &b);
            assert!(ab <= ac + cb + 1e-9, "triangle violated: {ab} > {ac} + {cb}");
            // Translation invariance.
            let shift = Vector2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let a2 = GaussianState::new(a.x() + shift.x, a.y() + shift.y, a.sigma_x(), a.sigma_y(), a.rho());
            let b2 = GaussianState::new(b.x() + shift.x, b.y() + shift.y, b.sigma_x(), b.sigma_y(), b.rho());
            assert!((wasserstein2(&a2, &b2) - ab).abs() < 1e-12);
        }
    }

    #[test]
    fn ot_map_identity_and_translation() {
        let g = GaussianState::new(1.0, 2.0, 1.5, 0.7, 0.2);
        let m = ot_map(&g, &g).unwrap();
        assert!((m.matrix() - Matrix2::identity()).norm() < 1e-9);
        assert!((m.apply(g.mean()) - g.mean()).norm() < 1e-9);

        let h = GaussianState::new(4.0, 6.0, 1.5, 0.7, 0.2);
        let t = ot_map(&g, &h).unwrap();
        assert!((t.matrix() - Matrix2::identity()).norm() < 1e-9);
        let p = Vector2::new(-2.0, 0.5);
        assert!((t.apply(p) - (p + Vector2::new(3.0, 4.0))).norm() < 1e-9);
    }

    #[test]
    fn ot_map_scaling_case() {
        let g = GaussianState::isotropic(0.0, 0.0, 1.0);
        let h = GaussianState::isotropic(0.0, 0.0, 2.0);
        let m = ot_map(&g, &h).unwrap();
        assert!((m.matrix() - Matrix2::identity() * 2.0).norm() < 1e-9);
    }

    #[test]
    fn ot_map_pushforward_property() {
        let mut rng = crate::rng::stream_rng(9, crate::rng::Stream::Generic, 2);
        for _ in 0..1000 {
            let g1 = GaussianState::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.2..3.0),
                rng.gen_range(0.2..3.0),
                rng.gen_range(-0.9..0.9),
            );
            let g2 = GaussianState::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.2..3.0),
                rng.gen_range(0.2..3.0),
                rng.gen_range(-0.9..0.9),
            );
            let m = ot_map(&g1, &g2).unwrap();
            let a = m.matrix();
            assert!((a - a.transpose()).norm() < 1e-8, "A must be symmetric");
            // Mean maps exactly; covariance pushes forward within 1e-8.
            assert!((m.apply(g1.mean()) - g2.mean()).norm() < 1e-9);
            let push = a * g1.covariance() * a.transpose();
            assert!((push - g2.covariance()).norm() < 1e-8);
        }
    }

    #[test]
    fn ot_map_rejects_ill_conditioned() {
        let g = GaussianState::new(0.0, 0.0, 1e3, 1e-4, 0.0);
        let h = GaussianState::isotropic(0.0, 0.0, 1.0);
        assert!(matches!(
            ot_map(&g, &h),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn gmm_validation() {
        let g = GaussianState::isotropic(0.0, 0.0, 1.0);
        assert!(Gmm::new(vec![], vec![]).is_err());
        assert!(Gmm::new(vec![g], vec![0.5]).is_err());
        assert!(Gmm::new(vec![g, g], vec![0.7, 0.3]).is_ok());
        assert!(Gmm::new(vec![g, g], vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn serde_formats() {
        let g = GaussianState::new(1.0, 2.0, 3.0, 4.0, 0.5);
        assert_eq!(
            serde_json::to_string(&g).unwrap(),
            "[1.0,2.0,3.0,4.0,0.5]"
        );
        let gmm = Gmm::new(vec![g, g], vec![0.25, 0.75]).unwrap();
        let text = serde_json::to_string(&gmm).unwrap();
        assert!(text.starts_with(r#"{"weights":[0.25,0.75],"components":[["#));
        let back: Gmm = serde_json::from_str(&text).unwrap();
        assert_eq!(back, gmm);
    }
}
