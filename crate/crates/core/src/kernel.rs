//! Squared-exponential covariance over the (cutting speed, feed rate) plane.
//!
//! `k(a, b) = η² exp(−ρ₁ Δv² − ρ₂ Δf²)` with the replicate variance σ_β² (and
//! any numerical jitter) added on the diagonal of the training covariance only.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::data::ControlPoint;

/// First jitter tried, relative to η².
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter tried, relative to η².
pub const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel hyperparameter {name} must be finite and positive, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("covariance of {0} points is not positive definite even with maximum jitter")]
    NotPositiveDefinite(usize),
    #[error("covariance needs at least one point")]
    Empty,
    #[error("non-finite control point {0}")]
    NonFinitePoint(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Signal variance η_β².
    pub eta_sq: f64,
    /// Inverse squared length scale along cutting speed.
    pub rho1: f64,
    /// Inverse squared length scale along feed rate.
    pub rho2: f64,
    /// Replicate (nugget) variance σ_β².
    pub sigma_b_sq: f64,
}

impl KernelConfig {
    pub fn new(eta_sq: f64, rho1: f64, rho2: f64, sigma_b_sq: f64) -> Result<Self, KernelError> {
        let cfg = Self {
            eta_sq,
            rho1,
            rho2,
            sigma_b_sq,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        for (name, value) in [
            ("eta_sq", self.eta_sq),
            ("rho1", self.rho1),
            ("rho2", self.rho2),
            ("sigma_b_sq", self.sigma_b_sq),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(KernelError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }

    /// Prior variance at any single location, η² + σ_β².
    pub fn total_variance(&self) -> f64 {
        self.eta_sq + self.sigma_b_sq
    }
}

#[inline]
pub fn kernel_eval(a: &ControlPoint, b: &ControlPoint, cfg: &KernelConfig) -> f64 {
    let dv = a.v_c - b.v_c;
    let df = a.f - b.f;
    cfg.eta_sq * (-cfg.rho1 * dv * dv - cfg.rho2 * df * df).exp()
}

fn check_points(points: &[ControlPoint]) -> Result<(), KernelError> {
    if points.is_empty() {
        return Err(KernelError::Empty);
    }
    match points.iter().position(|p| !p.is_finite()) {
        Some(i) => Err(KernelError::NonFinitePoint(i)),
        None => Ok(()),
    }
}

fn assemble(points: &[ControlPoint], cfg: &KernelConfig, jitter: f64) -> DMatrix<f64> {
    let k = points.len();
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k {
        m[(i, i)] = cfg.eta_sq + cfg.sigma_b_sq + jitter;
        for j in 0..i {
            let v = kernel_eval(&points[i], &points[j], cfg);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Training covariance with `jitter` added to the diagonal. Fails if the result
/// does not admit a Cholesky factorization.
pub fn cov_matrix(points: &[ControlPoint], cfg: &KernelConfig, jitter: f64) -> Result<DMatrix<f64>, KernelError> {
    check_points(points)?;
    let m = assemble(points, cfg, jitter);
    if m.clone().cholesky().is_none() {
        return Err(KernelError::NotPositiveDefinite(points.len()));
    }
    Ok(m)
}

/// `M × K` covariance between prediction and training locations (no nugget).
pub fn cross_cov(stars: &[ControlPoint], train: &[ControlPoint], cfg: &KernelConfig) -> DMatrix<f64> {
    DMatrix::from_fn(stars.len(), train.len(), |i, j| kernel_eval(&stars[i], &train[j], cfg))
}

/// Cholesky factor of the training covariance, obtained with the escalating
/// jitter policy (1e-10·η² up to 1e-4·η², ×10 per attempt).
#[derive(Clone, Debug)]
pub struct CovFactor {
    chol: Cholesky<f64, Dyn>,
    /// Jitter relative to η² that succeeded.
    jitter_rel: f64,
}

impl CovFactor {
    pub fn new(points: &[ControlPoint], cfg: &KernelConfig) -> Result<Self, KernelError> {
        cfg.validate()?;
        check_points(points)?;
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            if let Some(chol) = assemble(points, cfg, rel * cfg.eta_sq).cholesky() {
                return Ok(Self { chol, jitter_rel: rel });
            }
            rel *= 10.0;
        }
        Err(KernelError::NotPositiveDefinite(points.len()))
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn jitter_rel(&self) -> f64 {
        self.jitter_rel
    }

    /// Lower-triangular factor.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L⁻¹ B` for a matrix right-hand side.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L x`.
    pub fn mul_l(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().lower_triangle() * x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Derivatives of the jittered training covariance with respect to
/// `(ln η², ln ρ₁, ln ρ₂, ln σ_β²)`, for jitter `jitter_rel · η²`.
pub fn cov_matrix_log_grads(points: &[ControlPoint], cfg: &KernelConfig, jitter_rel: f64) -> [DMatrix<f64>; 4] {
    let k = points.len();
    let mut d_eta = DMatrix::zeros(k, k);
    let mut d_rho1 = DMatrix::zeros(k, k);
    let mut d_rho2 = DMatrix::zeros(k, k);
    let d_sigma = DMatrix::from_diagonal_element(k, k, cfg.sigma_b_sq);
    for i in 0..k {
        d_eta[(i, i)] = cfg.eta_sq * (1.0 + jitter_rel);
        for j in 0..i {
            let dv = points[i].v_c - points[j].v_c;
            let df = points[i].f - points[j].f;
            let kij = kernel_eval(&points[i], &points[j], cfg);
            let (a, b, c) = (kij, -cfg.rho1 * dv * dv * kij, -cfg.rho2 * df * df * kij);
            d_eta[(i, j)] = a;
            d_eta[(j, i)] = a;
            d_rho1[(i, j)] = b;
            d_rho1[(j, i)] = b;
            d_rho2[(i, j)] = c;
            d_rho2[(j, i)] = c;
        }
    }
    [d_eta, d_rho1, d_rho2, d_sigma]
}

/// z-score transform of control settings, fitted on the training design.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub v_mean: f64,
    pub v_sd: f64,
    pub f_mean: f64,
    pub f_sd: f64,
}

impl Standardizer {
    pub const IDENTITY: Standardizer = Standardizer {
        v_mean: 0.0,
        v_sd: 1.0,
        f_mean: 0.0,
        f_sd: 1.0,
    };

    /// Sample mean and standard deviation per axis; a degenerate axis keeps
    /// unit scale.
    pub fn fit(points: &[ControlPoint]) -> Self {
        let (v_mean, v_sd) = mean_sd(points.iter().map(|p| p.v_c));
        let (f_mean, f_sd) = mean_sd(points.iter().map(|p| p.f));
        Self {
            v_mean,
            v_sd,
            f_mean,
            f_sd,
        }
    }

    pub fn apply(&self, p: &ControlPoint) -> ControlPoint {
        ControlPoint::new((p.v_c - self.v_mean) / self.v_sd, (p.f - self.f_mean) / self.f_sd)
    }

    pub fn apply_all(&self, points: &[ControlPoint]) -> Vec<ControlPoint> {
        points.iter().map(|p| self.apply(p)).collect()
    }
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 1.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    (mean, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit() -> KernelConfig {
        KernelConfig::new(1.0, 1.0, 1.0, 0.5).unwrap()
    }

    #[test]
    fn zero_distance_is_signal_variance() {
        let cfg = KernelConfig::new(2.5, 0.3, 0.7, 0.1).unwrap();
        let p = ControlPoint::new(40.0, 30.0);
        assert_eq!(kernel_eval(&p, &p, &cfg), 2.5);
    }

    #[test]
    fn unit_speed_offset() {
        let cfg = unit();
        let v = kernel_eval(&ControlPoint::new(1.0, 5.0), &ControlPoint::new(2.0, 5.0), &cfg);
        assert_relative_eq!(v, (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn decays_to_zero() {
        let cfg = unit();
        // rho1 * dv^2 = 36 > 30
        let v = kernel_eval(&ControlPoint::new(0.0, 0.0), &ControlPoint::new(6.0, 0.0), &cfg);
        assert!(v < 1e-12);
    }

    #[test]
    fn single_point_matrix() {
        let cfg = KernelConfig::new(1.3, 1.0, 1.0, 0.2).unwrap();
        let m = cov_matrix(&[ControlPoint::new(1.0, 1.0)], &cfg, 1e-6).unwrap();
        assert_eq!(m.shape(), (1, 1));
        assert_relative_eq!(m[(0, 0)], 1.3 + 0.2 + 1e-6, max_relative = 1e-15);
    }

    #[test]
    fn coincident_pair() {
        let p = ControlPoint::new(3.0, 4.0);
        let m = cov_matrix(&[p, p], &unit(), 0.0).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.5, 1.0, 1.0, 1.5]));
        let eig = m.symmetric_eigenvalues();
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        assert_relative_eq!(e[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(e[1], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn cross_cov_identity() {
        let cfg = KernelConfig::new(1.7, 0.4, 0.9, 0.3).unwrap();
        let pts: Vec<_> = (0..6).map(|i| ControlPoint::new(i as f64 * 0.37, (i * i) as f64 * 0.11)).collect();
        let jitter = 1e-7;
        let full = cov_matrix(&pts, &cfg, jitter).unwrap();
        let cross = cross_cov(&pts, &pts, &cfg);
        let diff = full - DMatrix::identity(6, 6) * (cfg.sigma_b_sq + jitter);
        assert!((diff - &cross).abs().max() < 1e-15);
        for i in 0..6 {
            let row = cross.row(i);
            let (imax, _) = row.iter().enumerate().fold((0, f64::MIN), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
            assert_eq!(imax, i);
            assert_eq!(row[i], cfg.eta_sq);
        }
    }

    #[test]
    fn far_star_row_vanishes() {
        let pts: Vec<_> = (0..4).map(|i| ControlPoint::new(i as f64, 0.0)).collect();
        let row = cross_cov(&[ControlPoint::new(100.0, 100.0)], &pts, &unit());
        assert!(row.iter().all(|&v| v < 1e-300));
    }

    #[test]
    fn jitter_escalates_for_duplicates() {
        let cfg = KernelConfig::new(1.0, 1.0, 1.0, 1e-300).unwrap();
        let p = ControlPoint::new(0.0, 0.0);
        let f = CovFactor::new(&[p, p, p], &cfg).unwrap();
        assert!(f.jitter_rel() >= JITTER_START);
        assert!(f.jitter_rel() <= JITTER_MAX * 1.0001);
    }

    #[test]
    fn errors() {
        assert!(KernelConfig::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(KernelConfig::new(1.0, f64::NAN, 1.0, 1.0).is_err());
        assert_eq!(cov_matrix(&[], &unit(), 0.0), Err(KernelError::Empty));
        assert_eq!(
            cov_matrix(&[ControlPoint::new(f64::NAN, 0.0)], &unit(), 0.0),
            Err(KernelError::NonFinitePoint(0))
        );
    }

    #[test]
    fn log_grads_match_finite_differences() {
        let cfg = KernelConfig::new(1.7, 0.4, 0.9, 0.3).unwrap();
        let pts: Vec<_> = (0..5).map(|i| ControlPoint::new((i as f64).sin(), (i as f64 * 1.3).cos())).collect();
        let rel = 1e-6;
        let grads = cov_matrix_log_grads(&pts, &cfg, rel);
        let h = 1e-6;
        for (k, g) in grads.iter().enumerate() {
            let bump = |s: f64| {
                let mut c = cfg;
                let f = s.exp();
                match k {
                    0 => c.eta_sq *= f,
                    1 => c.rho1 *= f,
                    2 => c.rho2 *= f,
                    _ => c.sigma_b_sq *= f,
                }
                assemble(&pts, &c, rel * c.eta_sq)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - g).abs().max() < 1e-8, "parameter {k}");
        }
    }

    #[test]
    fn standardizer_roundtrip_stats() {
        let pts = vec![ControlPoint::new(20.0, 20.0), ControlPoint::new(40.0, 35.0), ControlPoint::new(60.0, 50.0)];
        let s = Standardizer::fit(&pts);
        let z = s.apply_all(&pts);
        assert_relative_eq!(z[1].v_c, 0.0, epsilon = 1e-15);
        assert_relative_eq!(z[0].v_c, -1.0, epsilon = 1e-15);
        let single = Standardizer::fit(&pts[..1]);
        assert_eq!(single.v_sd, 1.0);
    }
}
