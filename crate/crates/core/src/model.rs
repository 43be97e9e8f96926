//! Joint log-posterior of the hierarchical wear model for one force channel.
//!
//! Per experiment `i` the force grows linearly with cutting length,
//! `F_ij = α_i + β_i L_ij + ε_ij`, `ε_ij ~ N(0, σ_i²)`. Intercepts share a
//! normal population `α_i ~ N(μ_α, σ_α²)`; slopes carry a Gaussian-process
//! prior over the standardized settings, `β ~ N(μ_β 1, Σ)`. Hyperpriors
//! follow the printed form: Half-Cauchy on the variances σ_i², σ_α², σ_β², η²
//! and on the inverse length-scale parameters ρ₁⁻¹, ρ₂⁻¹.
//!
//! Densities are evaluated on an unconstrained vector:
//!
//! | block            | coordinates                                   |
//! |------------------|-----------------------------------------------|
//! | `α`              | raw                                           |
//! | `β` or `z`       | raw slopes (centered) or whitened (non-centered) |
//! | `σ_i²`           | log                                           |
//! | `μ_α`, `σ_α²`    | raw, log                                      |
//! | `μ_β`            | raw                                           |
//! | `η², ρ₁, ρ₂, σ_β²` | log                                         |
//!
//! The non-centered form writes `β = μ_β 1 + chol(Σ) z` with `z ~ N(0, I)`.
//! Log-Jacobians of every transform are included.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ControlPoint, ExperimentRecord, ForceChannel, SeriesError};
use crate::kernel::{cov_matrix_log_grads, CovFactor, KernelConfig, KernelError, Standardizer};
use crate::sampler::LogDensity;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("experiment {id}: {source}")]
    Series { id: u32, source: SeriesError },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Prior scales. Defaults reproduce the published analysis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Half-Cauchy scale on each residual variance σ_i².
    pub sigma_sq_scale: f64,
    /// Normal sd on μ_α.
    pub mu_alpha_sd: f64,
    /// Half-Cauchy scale on σ_α².
    pub sigma_alpha_sq_scale: f64,
    /// Normal sd on μ_β.
    pub mu_beta_sd: f64,
    /// Half-Cauchy scale on σ_β².
    pub sigma_b_sq_scale: f64,
    /// Half-Cauchy scale on η_β².
    pub eta_sq_scale: f64,
    /// Half-Cauchy scale on ρ₁⁻¹.
    pub rho1_inv_scale: f64,
    /// Half-Cauchy scale on ρ₂⁻¹.
    pub rho2_inv_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sigma_sq_scale: 10.0,
            mu_alpha_sd: 10.0,
            sigma_alpha_sq_scale: 10.0,
            mu_beta_sd: 10.0,
            sigma_b_sq_scale: 5.0,
            eta_sq_scale: 5.0,
            rho1_inv_scale: 5.0,
            rho2_inv_scale: 5.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [
            self.sigma_sq_scale,
            self.mu_alpha_sd,
            self.sigma_alpha_sq_scale,
            self.mu_beta_sd,
            self.sigma_b_sq_scale,
            self.eta_sq_scale,
            self.rho1_inv_scale,
            self.rho2_inv_scale,
        ];
        if all.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(ModelError::InvalidParams("prior scales must be finite and positive".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    #[default]
    Centered,
    NonCentered,
}

/// The full latent state on the constrained scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Residual standard deviations σ_i.
    pub sigma: Vec<f64>,
    pub mu_alpha: f64,
    /// Intercept population standard deviation σ_α.
    pub sigma_alpha: f64,
    pub mu_beta: f64,
    pub kernel: KernelConfig,
}

impl ModelParams {
    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self, k: usize) -> Result<(), ModelError> {
        if self.alpha.len() != k || self.beta.len() != k || self.sigma.len() != k {
            return Err(ModelError::InvalidParams(format!("expected {k} experiments in every block")));
        }
        let finite = self
            .alpha
            .iter()
            .chain(&self.beta)
            .chain([&self.mu_alpha, &self.mu_beta])
            .all(|x| x.is_finite());
        if !finite {
            return Err(ModelError::InvalidParams("non-finite location parameter".into()));
        }
        if !self.sigma.iter().chain([&self.sigma_alpha]).all(|s| s.is_finite() && *s > 0.0) {
            return Err(ModelError::InvalidParams("scale parameters must be positive".into()));
        }
        self.kernel.validate()?;
        Ok(())
    }

    /// Flattened in [`HierarchicalModel::param_names`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.k() + 7);
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.sigma);
        v.extend_from_slice(&[
            self.mu_alpha,
            self.sigma_alpha,
            self.mu_beta,
            self.kernel.eta_sq,
            self.kernel.rho1,
            self.kernel.rho2,
            self.kernel.sigma_b_sq,
        ]);
        v
    }

    pub fn from_slice(k: usize, v: &[f64]) -> Result<Self, ModelError> {
        if v.len() != 3 * k + 7 {
            return Err(ModelError::Dimension {
                got: v.len(),
                expected: 3 * k + 7,
            });
        }
        let h = &v[3 * k..];
        Ok(Self {
            alpha: v[..k].to_vec(),
            beta: v[k..2 * k].to_vec(),
            sigma: v[2 * k..3 * k].to_vec(),
            mu_alpha: h[0],
            sigma_alpha: h[1],
            mu_beta: h[2],
            kernel: KernelConfig {
                eta_sq: h[3],
                rho1: h[4],
                rho2: h[5],
                sigma_b_sq: h[6],
            },
        })
    }
}

#[inline]
pub(crate) fn log_normal(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// Log density of Half-Cauchy(0, scale) at `x ≥ 0`.
#[inline]
pub fn log_half_cauchy(x: f64, scale: f64) -> f64 {
    let r = x / scale;
    std::f64::consts::LN_2 - (std::f64::consts::PI * scale).ln() - r.ln_1p_sq()
}

trait Ln1pSq {
    fn ln_1p_sq(self) -> f64;
}

impl Ln1pSq for f64 {
    /// `ln(1 + x²)` without overflow for large `x`.
    #[inline]
    fn ln_1p_sq(self) -> f64 {
        let a = self.abs();
        if a > 1e150 {
            2.0 * a.ln()
        } else {
            (a * a).ln_1p()
        }
    }
}

/// Half-Cauchy prior on `x = e^u` plus the log-Jacobian `u`; value and
/// derivative in `u`.
#[inline]
fn hc_log_scale(u: f64, scale: f64) -> (f64, f64) {
    let x = u.exp();
    let r2 = (x / scale).powi(2);
    let d = if r2.is_finite() { -2.0 * r2 / (1.0 + r2) } else { -2.0 };
    (log_half_cauchy(x, scale) + u, d + 1.0)
}

/// Half-Cauchy prior on `1/x` with `x = e^u`, plus log-Jacobian `−u`.
#[inline]
fn hc_inverse_log_scale(u: f64, scale: f64) -> (f64, f64) {
    let (v, d) = hc_log_scale(-u, scale);
    (v, -d)
}

/// Breakdown of the log prior into its additive pieces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorTerms {
    /// Multivariate normal of β under the GP.
    pub gp: f64,
    /// Normal population term of the intercepts.
    pub alpha: f64,
    /// Hyperprior densities on the constrained scale.
    pub hyper: f64,
    /// Log-Jacobian of the log-scale parameterization.
    pub jacobian: f64,
}

impl PriorTerms {
    pub fn total(&self) -> f64 {
        self.gp + self.alpha + self.hyper + self.jacobian
    }
}

/// One channel's regression data.
#[derive(Clone, Debug)]
struct ChannelData {
    length: Vec<f64>,
    force: Vec<f64>,
}

/// Unconstrained coordinate map.
#[derive(Clone, Copy, Debug)]
struct Layout {
    k: usize,
}

impl Layout {
    fn dim(self) -> usize {
        3 * self.k + 7
    }
    fn alpha(self) -> usize {
        0
    }
    fn beta(self) -> usize {
        self.k
    }
    fn log_sigma_sq(self) -> usize {
        2 * self.k
    }
    fn hyper(self) -> usize {
        3 * self.k
    }
}

// offsets inside the hyper block
const MU_ALPHA: usize = 0;
const LOG_SIGMA_ALPHA_SQ: usize = 1;
const MU_BETA: usize = 2;
const LOG_ETA_SQ: usize = 3;
const LOG_RHO1: usize = 4;
const LOG_RHO2: usize = 5;
const LOG_SIGMA_B_SQ: usize = 6;

fn kernel_from_logs(h: &[f64]) -> Result<KernelConfig, ModelError> {
    let cfg = KernelConfig {
        eta_sq: h[0].exp(),
        rho1: h[1].exp(),
        rho2: h[2].exp(),
        sigma_b_sq: h[3].exp(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Gaussian-process log density of `r = y − μ1` under `N(0, Σ)` together with
/// its gradient in `r` and in the four log kernel hyperparameters.
pub(crate) struct GpTerm {
    pub value: f64,
    pub grad_r: DVector<f64>,
    pub grad_log_kernel: [f64; 4],
}

/// `L⁻¹ S L⁻ᵀ` for symmetric `S`.
fn whiten(factor: &CovFactor, s: &DMatrix<f64>) -> DMatrix<f64> {
    let b = factor.solve_lower_mat(s);
    factor.solve_lower_mat(&b.transpose())
}

pub(crate) fn gp_term(
    factor: &CovFactor,
    points: &[ControlPoint],
    cfg: &KernelConfig,
    r: &DVector<f64>,
    with_grad: bool,
) -> GpTerm {
    let k = r.len();
    let a = factor.solve(r);
    let value = -0.5 * (k as f64) * LN_2PI - 0.5 * factor.log_det() - 0.5 * r.dot(&a);
    let mut grad_log_kernel = [0.0; 4];
    if with_grad {
        for (g, ds) in grad_log_kernel
            .iter_mut()
            .zip(cov_matrix_log_grads(points, cfg, factor.jitter_rel()))
        {
            let quad = a.dot(&(&ds * &a));
            let trace = whiten(factor, &ds).trace();
            *g = 0.5 * (quad - trace);
        }
    }
    GpTerm {
        value,
        grad_r: -a,
        grad_log_kernel,
    }
}

/// Hierarchical linear model with GP-distributed slopes for one force channel.
#[derive(Clone, Debug)]
pub struct HierarchicalModel {
    ids: Vec<u32>,
    /// Standardized settings used by the kernel.
    points: Vec<ControlPoint>,
    standardizer: Standardizer,
    data: Vec<ChannelData>,
    channel: ForceChannel,
    priors: PriorConfig,
    parameterization: Parameterization,
}

impl HierarchicalModel {
    pub fn new(
        records: &[ExperimentRecord],
        channel: ForceChannel,
        priors: PriorConfig,
        parameterization: Parameterization,
    ) -> Result<Self, ModelError> {
        if records.is_empty() {
            return Err(ModelError::InvalidData("no experiments".into()));
        }
        priors.validate()?;
        let mut ids: Vec<u32> = records.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(ModelError::InvalidData("duplicate experiment ids".into()));
        }
        for r in records {
            if !r.control.is_finite() {
                return Err(ModelError::InvalidData(format!("experiment {}: non-finite control", r.id)));
            }
            r.series
                .validate()
                .map_err(|source| ModelError::Series { id: r.id, source })?;
        }
        let raw: Vec<ControlPoint> = records.iter().map(|r| r.control).collect();
        let standardizer = Standardizer::fit(&raw);
        Ok(Self {
            ids: records.iter().map(|r| r.id).collect(),
            points: standardizer.apply_all(&raw),
            standardizer,
            data: records
                .iter()
                .map(|r| ChannelData {
                    length: r.series.length.clone(),
                    force: r.series.force(channel).to_vec(),
                })
                .collect(),
            channel,
            priors,
            parameterization,
        })
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn channel(&self) -> ForceChannel {
        self.channel
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn standardized_points(&self) -> &[ControlPoint] {
        &self.points
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    fn layout(&self) -> Layout {
        Layout { k: self.k() }
    }

    /// Names of the constrained quantities, in [`ModelParams::to_vec`] order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.layout().dim());
        for block in ["alpha", "beta", "sigma"] {
            names.extend(self.ids.iter().map(|id| format!("{block}[{id}]")));
        }
        names.extend(
            ["mu_alpha", "sigma_alpha", "mu_beta", "eta_beta_sq", "rho1", "rho2", "sigma_beta_sq"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        let expected = self.layout().dim();
        if x.len() != expected {
            return Err(ModelError::Dimension { got: x.len(), expected });
        }
        Ok(())
    }

    /// Unconstrained vector for a constrained state.
    pub fn pack(&self, params: &ModelParams) -> Result<Vec<f64>, ModelError> {
        let k = self.k();
        params.validate(k)?;
        let mut x = Vec::with_capacity(self.layout().dim());
        x.extend_from_slice(&params.alpha);
        match self.parameterization {
            Parameterization::Centered => x.extend_from_slice(&params.beta),
            Parameterization::NonCentered => {
                let factor = CovFactor::new(&self.points, &params.kernel)?;
                let r = DVector::from_iterator(k, params.beta.iter().map(|b| b - params.mu_beta));
                x.extend(factor.solve_lower(&r).iter());
            }
        }
        x.extend(params.sigma.iter().map(|s| 2.0 * s.ln()));
        x.extend_from_slice(&[
            params.mu_alpha,
            2.0 * params.sigma_alpha.ln(),
            params.mu_beta,
            params.kernel.eta_sq.ln(),
            params.kernel.rho1.ln(),
            params.kernel.rho2.ln(),
            params.kernel.sigma_b_sq.ln(),
        ]);
        Ok(x)
    }

    /// Constrained state for an unconstrained vector.
    pub fn unpack(&self, x: &[f64]) -> Result<ModelParams, ModelError> {
        self.check_dim(x)?;
        let lay = self.layout();
        let k = self.k();
        let h = &x[lay.hyper()..];
        let kernel = kernel_from_logs(&h[LOG_ETA_SQ..])?;
        let slopes = &x[lay.beta()..lay.beta() + k];
        let beta = match self.parameterization {
            Parameterization::Centered => slopes.to_vec(),
            Parameterization::NonCentered => {
                let factor = CovFactor::new(&self.points, &kernel)?;
                let z = DVector::from_column_slice(slopes);
                factor.mul_l(&z).iter().map(|v| v + h[MU_BETA]).collect()
            }
        };
        Ok(ModelParams {
            alpha: x[..k].to_vec(),
            beta,
            sigma: x[lay.log_sigma_sq()..lay.log_sigma_sq() + k]
                .iter()
                .map(|u| (0.5 * u).exp())
                .collect(),
            mu_alpha: h[MU_ALPHA],
            sigma_alpha: (0.5 * h[LOG_SIGMA_ALPHA_SQ]).exp(),
            mu_beta: h[MU_BETA],
            kernel,
        })
    }

    /// Log density (up to a constant) on the unconstrained scale.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.evaluate(x, None)
    }

    /// Log density and its gradient on the unconstrained scale.
    pub fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, ModelError> {
        self.check_dim(grad)?;
        self.evaluate(x, Some(grad))
    }

    fn evaluate(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParams("non-finite coordinate".into()));
        }
        let lay = self.layout();
        let k = self.k();
        let h = &x[lay.hyper()..];
        let cfg = kernel_from_logs(&h[LOG_ETA_SQ..])?;
        let factor = CovFactor::new(&self.points, &cfg)?;
        let with_grad = grad.is_some();
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }

        let mu_beta = h[MU_BETA];
        let slopes = DVector::from_column_slice(&x[lay.beta()..lay.beta() + k]);
        let beta = match self.parameterization {
            Parameterization::Centered => slopes.clone(),
            Parameterization::NonCentered => factor.mul_l(&slopes).add_scalar(mu_beta),
        };

        // likelihood
        let mut total = 0.0;
        let mut grad_beta = DVector::zeros(k);
        for i in 0..k {
            let d = &self.data[i];
            let alpha = x[lay.alpha() + i];
            let log_s2 = x[lay.log_sigma_sq() + i];
            let inv_s2 = (-log_s2).exp();
            let (mut rss, mut sr, mut srl) = (0.0, 0.0, 0.0);
            for (&l, &f) in d.length.iter().zip(&d.force) {
                let r = f - alpha - beta[i] * l;
                rss += r * r;
                sr += r;
                srl += r * l;
            }
            let n = d.length.len() as f64;
            total += -0.5 * n * (LN_2PI + log_s2) - 0.5 * rss * inv_s2;
            if let Some(g) = grad.as_deref_mut() {
                g[lay.alpha() + i] += sr * inv_s2;
                g[lay.log_sigma_sq() + i] += -0.5 * n + 0.5 * rss * inv_s2;
            }
            grad_beta[i] = srl * inv_s2;
        }

        // intercept population
        let mu_alpha = h[MU_ALPHA];
        let log_sa2 = h[LOG_SIGMA_ALPHA_SQ];
        let inv_sa2 = (-log_sa2).exp();
        let mut dev2 = 0.0;
        for i in 0..k {
            let d = x[lay.alpha() + i] - mu_alpha;
            dev2 += d * d;
            if let Some(g) = grad.as_deref_mut() {
                g[lay.alpha() + i] -= d * inv_sa2;
                g[lay.hyper() + MU_ALPHA] += d * inv_sa2;
            }
        }
        total += -0.5 * (k as f64) * (LN_2PI + log_sa2) - 0.5 * dev2 * inv_sa2;
        if let Some(g) = grad.as_deref_mut() {
            g[lay.hyper() + LOG_SIGMA_ALPHA_SQ] += -0.5 * k as f64 + 0.5 * dev2 * inv_sa2;
        }

        // slopes
        let mut grad_kernel = [0.0; 4];
        match self.parameterization {
            Parameterization::Centered => {
                let r = beta.add_scalar(-mu_beta);
                let gp = gp_term(&factor, &self.points, &cfg, &r, with_grad);
                total += gp.value;
                grad_beta += &gp.grad_r;
                grad_kernel = gp.grad_log_kernel;
                if let Some(g) = grad.as_deref_mut() {
                    for i in 0..k {
                        g[lay.beta() + i] = grad_beta[i];
                    }
                    g[lay.hyper() + MU_BETA] -= gp.grad_r.sum();
                }
            }
            Parameterization::NonCentered => {
                total += -0.5 * (k as f64) * LN_2PI - 0.5 * slopes.norm_squared();
                if let Some(g) = grad.as_deref_mut() {
                    let l = factor.l();
                    let w = l.transpose() * &grad_beta;
                    for i in 0..k {
                        g[lay.beta() + i] = w[i] - slopes[i];
                    }
                    g[lay.hyper() + MU_BETA] += grad_beta.sum();
                    // dL = L Φ(L⁻¹ dΣ L⁻ᵀ), Φ = lower triangle with halved diagonal
                    for (gk, ds) in grad_kernel
                        .iter_mut()
                        .zip(cov_matrix_log_grads(&self.points, &cfg, factor.jitter_rel()))
                    {
                        let mut phi = whiten(&factor, &ds).lower_triangle();
                        for j in 0..k {
                            phi[(j, j)] *= 0.5;
                        }
                        *gk = w.dot(&(phi * &slopes));
                    }
                }
            }
        }

        // hyperpriors with log-scale Jacobians
        let p = &self.priors;
        for i in 0..k {
            let (v, d) = hc_log_scale(x[lay.log_sigma_sq() + i], p.sigma_sq_scale);
            total += v;
            if let Some(g) = grad.as_deref_mut() {
                g[lay.log_sigma_sq() + i] += d;
            }
        }
        total += log_normal(mu_alpha, 0.0, p.mu_alpha_sd) + log_normal(mu_beta, 0.0, p.mu_beta_sd);
        let scale_terms = [
            (LOG_SIGMA_ALPHA_SQ, hc_log_scale(log_sa2, p.sigma_alpha_sq_scale)),
            (LOG_ETA_SQ, hc_log_scale(h[LOG_ETA_SQ], p.eta_sq_scale)),
            (LOG_RHO1, hc_inverse_log_scale(h[LOG_RHO1], p.rho1_inv_scale)),
            (LOG_RHO2, hc_inverse_log_scale(h[LOG_RHO2], p.rho2_inv_scale)),
            (LOG_SIGMA_B_SQ, hc_log_scale(h[LOG_SIGMA_B_SQ], p.sigma_b_sq_scale)),
        ];
        for (_, (v, _)) in scale_terms {
            total += v;
        }
        if let Some(g) = grad {
            let hy = lay.hyper();
            g[hy + MU_ALPHA] -= mu_alpha / (p.mu_alpha_sd * p.mu_alpha_sd);
            g[hy + MU_BETA] -= mu_beta / (p.mu_beta_sd * p.mu_beta_sd);
            for (off, (_, d)) in scale_terms {
                g[hy + off] += d;
            }
            for (j, gk) in grad_kernel.iter().enumerate() {
                g[hy + LOG_ETA_SQ + j] += gk;
            }
        }

        if !total.is_finite() {
            return Err(ModelError::InvalidParams("log density is not finite".into()));
        }
        Ok(total)
    }
}

impl LogDensity for HierarchicalModel {
    fn dim(&self) -> usize {
        self.layout().dim()
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.log_density_and_grad(x, grad).unwrap_or(f64::NEG_INFINITY)
    }

    fn param_names(&self) -> Vec<String> {
        self.names()
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        match self.unpack(x) {
            Ok(p) => p.to_vec(),
            Err(_) => vec![f64::NAN; self.layout().dim()],
        }
    }
}

fn check_records(data: &[ExperimentRecord], channel: ForceChannel) -> Result<(), ModelError> {
    for r in data {
        if r.series.force(channel).iter().chain(&r.series.length).any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidData(format!("experiment {}: non-finite measurement", r.id)));
        }
    }
    Ok(())
}

/// `Σ_i Σ_j log N(F_ij | α_i + β_i L_ij, σ_i²)` for one channel.
pub fn log_likelihood(params: &ModelParams, data: &[ExperimentRecord], channel: ForceChannel) -> Result<f64, ModelError> {
    params.validate(data.len())?;
    check_records(data, channel)?;
    let mut total = 0.0;
    for (i, r) in data.iter().enumerate() {
        let force = r.series.force(channel);
        for (&l, &f) in r.series.length.iter().zip(force) {
            total += log_normal(f, params.alpha[i] + params.beta[i] * l, params.sigma[i]);
        }
    }
    Ok(total)
}

/// Gradient of [`log_likelihood`] in `(α, β)`, returned as two blocks.
pub fn grad_log_likelihood(
    params: &ModelParams,
    data: &[ExperimentRecord],
    channel: ForceChannel,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    params.validate(data.len())?;
    check_records(data, channel)?;
    let mut ga = vec![0.0; data.len()];
    let mut gb = vec![0.0; data.len()];
    for (i, r) in data.iter().enumerate() {
        let s2 = params.sigma[i] * params.sigma[i];
        for (&l, &f) in r.series.length.iter().zip(r.series.force(channel)) {
            let res = f - params.alpha[i] - params.beta[i] * l;
            ga[i] += res / s2;
            gb[i] += res * l / s2;
        }
    }
    Ok((ga, gb))
}

/// Additive pieces of the log prior. The GP term uses the same standardized
/// settings and jitter policy as [`HierarchicalModel`].
pub fn log_prior_terms(
    params: &ModelParams,
    data: &[ExperimentRecord],
    priors: &PriorConfig,
) -> Result<PriorTerms, ModelError> {
    let k = data.len();
    params.validate(k)?;
    priors.validate()?;
    let raw: Vec<ControlPoint> = data.iter().map(|r| r.control).collect();
    let points = Standardizer::fit(&raw).apply_all(&raw);
    let cfg = params.kernel;
    let factor = CovFactor::new(&points, &cfg)?;
    let r = DVector::from_iterator(k, params.beta.iter().map(|b| b - params.mu_beta));
    let gp = gp_term(&factor, &points, &cfg, &r, false).value;

    let alpha = params
        .alpha
        .iter()
        .map(|a| log_normal(*a, params.mu_alpha, params.sigma_alpha))
        .sum();

    let sigma_sq: Vec<f64> = params.sigma.iter().map(|s| s * s).collect();
    let sa2 = params.sigma_alpha * params.sigma_alpha;
    let mut hyper: f64 = sigma_sq.iter().map(|s2| log_half_cauchy(*s2, priors.sigma_sq_scale)).sum();
    hyper += log_normal(params.mu_alpha, 0.0, priors.mu_alpha_sd)
        + log_half_cauchy(sa2, priors.sigma_alpha_sq_scale)
        + log_normal(params.mu_beta, 0.0, priors.mu_beta_sd)
        + log_half_cauchy(cfg.sigma_b_sq, priors.sigma_b_sq_scale)
        + log_half_cauchy(cfg.eta_sq, priors.eta_sq_scale)
        + log_half_cauchy(1.0 / cfg.rho1, priors.rho1_inv_scale)
        + log_half_cauchy(1.0 / cfg.rho2, priors.rho2_inv_scale);

    // log x for each variance sampled as ln x; -ln ρ for each ρ sampled as ln ρ
    let jacobian = sigma_sq.iter().map(|s| s.ln()).sum::<f64>()
        + sa2.ln()
        + cfg.sigma_b_sq.ln()
        + cfg.eta_sq.ln()
        - cfg.rho1.ln()
        - cfg.rho2.ln();

    Ok(PriorTerms {
        gp,
        alpha,
        hyper,
        jacobian,
    })
}

pub fn log_prior(params: &ModelParams, data: &[ExperimentRecord], priors: &PriorConfig) -> Result<f64, ModelError> {
    log_prior_terms(params, data, priors).map(|t| t.total())
}

/// Log posterior on the centered unconstrained scale (slopes raw, positive
/// parameters logged), up to an additive constant.
pub fn log_posterior(
    params: &ModelParams,
    data: &[ExperimentRecord],
    priors: &PriorConfig,
    channel: ForceChannel,
) -> Result<f64, ModelError> {
    Ok(log_likelihood(params, data, channel)? + log_prior(params, data, priors)?)
}

/// Analytic gradient of the unconstrained log density at `params`, in the
/// coordinate order of [`HierarchicalModel`] for the given parameterization.
pub fn grad_log_posterior(
    params: &ModelParams,
    data: &[ExperimentRecord],
    priors: &PriorConfig,
    channel: ForceChannel,
    parameterization: Parameterization,
) -> Result<Vec<f64>, ModelError> {
    let model = HierarchicalModel::new(data, channel, *priors, parameterization)?;
    let x = model.pack(params)?;
    let mut g = vec![0.0; x.len()];
    model.log_density_and_grad(&x, &mut g)?;
    Ok(g)
}

/// Direct GP regression of a scalar response on the settings: `y ~ N(μ 1, Σ)`.
/// Used for log tool life, where no per-experiment regression is needed.
///
/// Unconstrained coordinates: `[μ, ln η², ln ρ₁, ln ρ₂, ln σ_β²]`.
#[derive(Clone, Debug)]
pub struct GpResponseModel {
    ids: Vec<u32>,
    points: Vec<ControlPoint>,
    standardizer: Standardizer,
    y: DVector<f64>,
    priors: PriorConfig,
}

impl GpResponseModel {
    pub fn new(ids: Vec<u32>, controls: &[ControlPoint], y: &[f64], priors: PriorConfig) -> Result<Self, ModelError> {
        if controls.len() != y.len() || ids.len() != y.len() {
            return Err(ModelError::InvalidData("ids, controls and responses differ in length".into()));
        }
        if y.is_empty() {
            return Err(ModelError::InvalidData("no observations".into()));
        }
        if y.iter().any(|v| !v.is_finite()) || controls.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::InvalidData("non-finite response or control".into()));
        }
        priors.validate()?;
        let standardizer = Standardizer::fit(controls);
        Ok(Self {
            ids,
            points: standardizer.apply_all(controls),
            standardizer,
            y: DVector::from_column_slice(y),
            priors,
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.y
    }

    fn evaluate(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64, ModelError> {
        if x.len() != 5 {
            return Err(ModelError::Dimension { got: x.len(), expected: 5 });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParams("non-finite coordinate".into()));
        }
        let cfg = kernel_from_logs(&x[1..])?;
        let factor = CovFactor::new(&self.points, &cfg)?;
        let r = self.y.add_scalar(-x[0]);
        let gp = gp_term(&factor, &self.points, &cfg, &r, grad.is_some());
        let p = &self.priors;
        let terms = [
            hc_log_scale(x[1], p.eta_sq_scale),
            hc_inverse_log_scale(x[2], p.rho1_inv_scale),
            hc_inverse_log_scale(x[3], p.rho2_inv_scale),
            hc_log_scale(x[4], p.sigma_b_sq_scale),
        ];
        let total = gp.value + log_normal(x[0], 0.0, p.mu_beta_sd) + terms.iter().map(|t| t.0).sum::<f64>();
        if let Some(g) = grad {
            g[0] = -gp.grad_r.sum() - x[0] / (p.mu_beta_sd * p.mu_beta_sd);
            for j in 0..4 {
                g[1 + j] = gp.grad_log_kernel[j] + terms[j].1;
            }
        }
        if !total.is_finite() {
            return Err(ModelError::InvalidParams("log density is not finite".into()));
        }
        Ok(total)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.evaluate(x, None)
    }
}

impl LogDensity for GpResponseModel {
    fn dim(&self) -> usize {
        5
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(x, Some(grad)).unwrap_or(f64::NEG_INFINITY)
    }

    fn param_names(&self) -> Vec<String> {
        ["mu", "eta_sq", "rho1", "rho2", "sigma_sq"].iter().map(|s| s.to_string()).collect()
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![x[0]];
        out.extend(x[1..].iter().map(|u| u.exp()));
        out
    }
}
