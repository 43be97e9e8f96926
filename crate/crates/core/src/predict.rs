//! Posterior-predictive response surfaces and the Taylor tool-life baseline.
//!
//! For one posterior draw with GP state `(μ, Σ, y)` the value at a new setting
//! is Gaussian with mean `μ + k*ᵀ Σ⁻¹ (y − μ1)` and variance
//! `η² + σ_β² − k*ᵀ Σ⁻¹ k*`. Averaging these conditionals over retained draws
//! integrates out the hyperparameters and the latent slopes.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Channel, ControlPoint, ExperimentRecord};
use crate::exec::Execution;
use crate::kernel::{kernel_eval, CovFactor, KernelConfig, KernelError, Standardizer};
use crate::model::{GpResponseModel, ModelError, PriorConfig};
use crate::sampler::{run_chains, ChainSet, SamplerConfig, SamplerError};

/// Default grid resolution per axis (20 × 20 = 400 nodes).
pub const DEFAULT_RESOLUTION: usize = 20;
/// Default allowance beyond the training box, as a fraction of its extent.
pub const DEFAULT_EXTRAPOLATION_MARGIN: f64 = 0.1;
/// Negative conditional variances beyond this are reported before clamping.
const NEGATIVE_VARIANCE_TOLERANCE: f64 = -1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("draws are missing parameter '{0}'")]
    MissingParameter(String),
    #[error("training set mismatch: {0}")]
    Training(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("grid {axis} range [{lo}, {hi}] extends beyond the allowed [{min}, {max}]")]
    Extrapolation {
        axis: &'static str,
        lo: f64,
        hi: f64,
        min: f64,
        max: f64,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid Taylor data: {0}")]
    TaylorDomain(String),
    #[error("degenerate Taylor fit: {0}")]
    TaylorDegenerate(String),
}

/// Posterior GP state at one draw, conditioned on its training values.
#[derive(Clone, Debug)]
pub struct ConditionalGp {
    factor: CovFactor,
    train: Vec<ControlPoint>,
    kernel: KernelConfig,
    mu: f64,
    /// `Σ⁻¹ (y − μ1)`.
    weights: DVector<f64>,
}

impl ConditionalGp {
    pub fn new(values: &[f64], mu: f64, kernel: &KernelConfig, train: &[ControlPoint]) -> Result<Self, PredictError> {
        if values.len() != train.len() {
            return Err(PredictError::Training(format!(
                "{} values for {} training points",
                values.len(),
                train.len()
            )));
        }
        let factor = CovFactor::new(train, kernel)?;
        let r = DVector::from_iterator(values.len(), values.iter().map(|b| b - mu));
        let weights = factor.solve(&r);
        Ok(Self {
            factor,
            train: train.to_vec(),
            kernel: *kernel,
            mu,
            weights,
        })
    }

    /// Conditional mean and variance at `star` (same coordinates as `train`).
    pub fn at(&self, star: &ControlPoint) -> (f64, f64) {
        let k_star = DVector::from_iterator(self.train.len(), self.train.iter().map(|t| kernel_eval(star, t, &self.kernel)));
        let mean = self.mu + k_star.dot(&self.weights);
        let v = self.factor.solve_lower(&k_star);
        let mut var = self.kernel.total_variance() - v.norm_squared();
        if var < 0.0 {
            if var < NEGATIVE_VARIANCE_TOLERANCE * self.kernel.total_variance() {
                log::warn!("conditional variance {var:e} clamped to zero");
            }
            var = 0.0;
        }
        (mean, var)
    }
}

/// Gaussian conditional of a GP at `star` given values `beta` at `train`.
pub fn gp_conditional(
    beta: &[f64],
    mu_beta: f64,
    kernel: &KernelConfig,
    train: &[ControlPoint],
    star: &ControlPoint,
) -> Result<(f64, f64), PredictError> {
    Ok(ConditionalGp::new(beta, mu_beta, kernel, train)?.at(star))
}

/// What the GP in a chain set describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Response {
    /// Latent wear-rate slopes (reported as is).
    Slopes,
    /// Log tool life (reported on the life scale).
    LogLife,
}

/// Per-draw conditionals ready for prediction at arbitrary settings.
#[derive(Clone, Debug)]
pub struct PosteriorGp {
    standardizer: Standardizer,
    raw_train: Vec<ControlPoint>,
    draws: Vec<ConditionalGp>,
    response: Response,
}

fn lookup(chains: &ChainSet, name: &str) -> Result<usize, PredictError> {
    chains
        .param_index(name)
        .ok_or_else(|| PredictError::MissingParameter(name.to_string()))
}

impl PosteriorGp {
    /// Slope GP from a force-channel fit. `ids[i]` names the experiment run at
    /// `controls[i]`.
    pub fn from_slopes(chains: &ChainSet, ids: &[u32], controls: &[ControlPoint], exec: Execution) -> Result<Self, PredictError> {
        if ids.len() != controls.len() || ids.is_empty() {
            return Err(PredictError::Training("ids and controls must be non-empty and aligned".into()));
        }
        let beta_idx = ids
            .iter()
            .map(|id| lookup(chains, &format!("beta[{id}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let hyper = ["mu_beta", "eta_beta_sq", "rho1", "rho2", "sigma_beta_sq"]
            .iter()
            .map(|n| lookup(chains, n))
            .collect::<Result<Vec<_>, _>>()?;
        Self::build(chains, controls, exec, Response::Slopes, |d| {
            (beta_idx.iter().map(|&i| d[i]).collect(), hyper_from(d, &hyper))
        })
    }

    /// Log-life GP from [`fit_tool_life`] draws and the observed lives.
    pub fn from_life(chains: &ChainSet, controls: &[ControlPoint], life: &[f64], exec: Execution) -> Result<Self, PredictError> {
        if life.len() != controls.len() || life.is_empty() {
            return Err(PredictError::Training("life values and controls must be non-empty and aligned".into()));
        }
        if life.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(PredictError::Training("tool life must be positive".into()));
        }
        let hyper = ["mu", "eta_sq", "rho1", "rho2", "sigma_sq"]
            .iter()
            .map(|n| lookup(chains, n))
            .collect::<Result<Vec<_>, _>>()?;
        let y: Vec<f64> = life.iter().map(|l| l.ln()).collect();
        Self::build(chains, controls, exec, Response::LogLife, |d| (y.clone(), hyper_from(d, &hyper)))
    }

    fn build<F>(chains: &ChainSet, controls: &[ControlPoint], exec: Execution, response: Response, extract: F) -> Result<Self, PredictError>
    where
        F: Fn(&[f64]) -> (Vec<f64>, (f64, KernelConfig)) + Sync + Send,
    {
        let standardizer = Standardizer::fit(controls);
        let train = standardizer.apply_all(controls);
        let flat: Vec<&Vec<f64>> = chains.flat_draws().collect();
        if flat.is_empty() {
            return Err(PredictError::InsufficientData("no retained draws".into()));
        }
        let draws = exec
            .map_indexed(flat.len(), |i| {
                let (values, (mu, kernel)) = extract(flat[i]);
                ConditionalGp::new(&values, mu, &kernel, &train)
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            standardizer,
            raw_train: controls.to_vec(),
            draws,
            response,
        })
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn response(&self) -> Response {
        self.response
    }

    pub fn training_controls(&self) -> &[ControlPoint] {
        &self.raw_train
    }

    /// Per-draw conditional (mean, variance) at a raw setting, on the model
    /// scale.
    pub fn conditionals(&self, star: &ControlPoint) -> Vec<(f64, f64)> {
        let z = self.standardizer.apply(star);
        self.draws.iter().map(|d| d.at(&z)).collect()
    }

    /// One predictive sample per retained draw, on the reported scale.
    pub fn predictive_draws(&self, star: &ControlPoint, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.conditionals(star)
            .into_iter()
            .map(|(m, v)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                let x = m + v.sqrt() * e;
                match self.response {
                    Response::Slopes => x,
                    Response::LogLife => x.exp(),
                }
            })
            .collect()
    }

    /// Predictive mean and standard deviation at a raw setting, combining the
    /// per-draw Gaussians exactly (law of total variance; log-normal moments
    /// for tool life).
    pub fn moments(&self, star: &ControlPoint) -> (f64, f64) {
        let cond = self.conditionals(star);
        let n = cond.len() as f64;
        match self.response {
            Response::Slopes => {
                let mean = cond.iter().map(|c| c.0).sum::<f64>() / n;
                let var = cond.iter().map(|(m, v)| v + (m - mean).powi(2)).sum::<f64>() / n;
                (mean, var.max(0.0).sqrt())
            }
            Response::LogLife => {
                let first = cond.iter().map(|(m, v)| (m + 0.5 * v).exp()).sum::<f64>() / n;
                let second = cond.iter().map(|(m, v)| (2.0 * m + 2.0 * v).exp()).sum::<f64>() / n;
                (first, (second - first * first).max(0.0).sqrt())
            }
        }
    }

    pub fn moments_at(&self, stars: &[ControlPoint], exec: Execution) -> Vec<(f64, f64)> {
        exec.map_slice(stars, |s| self.moments(s))
    }

    /// Training box widened by `margin` of its extent on each side.
    pub fn allowed_region(&self, margin: f64) -> ((f64, f64), (f64, f64)) {
        let hull = bounding_box(&self.raw_train);
        let widen = |(lo, hi): (f64, f64)| {
            let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
            (lo - margin * span, hi + margin * span)
        };
        (widen(hull.0), widen(hull.1))
    }

    /// Evaluate a response surface over `grid`, refusing grids that reach
    /// further than `margin` beyond the training box.
    pub fn surface(&self, grid: &GridSpec, channel: Channel, margin: f64, exec: Execution) -> Result<SurfaceGrid, PredictError> {
        grid.validate()?;
        let ((v_lo, v_hi), (f_lo, f_hi)) = self.allowed_region(margin);
        let eps = 1e-9;
        let out = |lo: f64, hi: f64, min: f64, max: f64| lo < min - eps * min.abs().max(1.0) || hi > max + eps * max.abs().max(1.0);
        if out(grid.v_min, grid.v_max, v_lo, v_hi) {
            return Err(PredictError::Extrapolation {
                axis: "cutting speed",
                lo: grid.v_min,
                hi: grid.v_max,
                min: v_lo,
                max: v_hi,
            });
        }
        if out(grid.f_min, grid.f_max, f_lo, f_hi) {
            return Err(PredictError::Extrapolation {
                axis: "feed rate",
                lo: grid.f_min,
                hi: grid.f_max,
                min: f_lo,
                max: f_hi,
            });
        }
        let v_axis = grid.v_axis();
        let f_axis = grid.f_axis();
        let nodes: Vec<ControlPoint> = v_axis
            .iter()
            .flat_map(|&v| f_axis.iter().map(move |&f| ControlPoint::new(v, f)))
            .collect();
        let m = self.moments_at(&nodes, exec);
        Ok(SurfaceGrid {
            v_axis,
            f_axis,
            mean: m.iter().map(|x| x.0).collect(),
            sd: m.iter().map(|x| x.1).collect(),
            channel,
        })
    }
}

fn hyper_from(d: &[f64], idx: &[usize]) -> (f64, KernelConfig) {
    (
        d[idx[0]],
        KernelConfig {
            eta_sq: d[idx[1]],
            rho1: d[idx[2]],
            rho2: d[idx[3]],
            sigma_b_sq: d[idx[4]],
        },
    )
}

/// ((v_min, v_max), (f_min, f_max)) of a set of settings.
pub fn bounding_box(points: &[ControlPoint]) -> ((f64, f64), (f64, f64)) {
    let mut v = (f64::INFINITY, f64::NEG_INFINITY);
    let mut f = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        v = (v.0.min(p.v_c), v.1.max(p.v_c));
        f = (f.0.min(p.f), f.1.max(p.f));
    }
    (v, f)
}

/// Samples of β* at `star`, one per retained draw of a force-channel fit.
pub fn predictive_draws(
    chains: &ChainSet,
    ids: &[u32],
    train: &[ControlPoint],
    star: &ControlPoint,
    seed: u64,
) -> Result<Vec<f64>, PredictError> {
    Ok(PosteriorGp::from_slopes(chains, ids, train, Execution::default())?.predictive_draws(star, seed))
}

/// Slope surface of a force-channel fit with the default margin.
pub fn surface(
    chains: &ChainSet,
    ids: &[u32],
    train: &[ControlPoint],
    grid: &GridSpec,
    channel: Channel,
) -> Result<SurfaceGrid, PredictError> {
    let exec = Execution::default();
    PosteriorGp::from_slopes(chains, ids, train, exec)?.surface(grid, channel, DEFAULT_EXTRAPOLATION_MARGIN, exec)
}

/// Regular grid over (cutting speed, feed rate); axes include both ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub v_min: f64,
    pub v_max: f64,
    pub nv: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub nf: usize,
}

impl GridSpec {
    /// The training box at the default 20 × 20 resolution.
    pub fn covering(points: &[ControlPoint]) -> Self {
        let ((v_min, v_max), (f_min, f_max)) = bounding_box(points);
        Self {
            v_min,
            v_max,
            nv: DEFAULT_RESOLUTION,
            f_min,
            f_max,
            nf: DEFAULT_RESOLUTION,
        }
    }

    pub fn validate(&self) -> Result<(), PredictError> {
        if self.nv < 2 || self.nf < 2 {
            return Err(PredictError::Grid("resolution must be at least 2 per axis".into()));
        }
        let all = [self.v_min, self.v_max, self.f_min, self.f_max];
        if all.iter().any(|x| !x.is_finite()) || self.v_min >= self.v_max || self.f_min >= self.f_max {
            return Err(PredictError::Grid("ranges must be finite with min < max".into()));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nv * self.nf
    }

    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect()
    }

    pub fn v_axis(&self) -> Vec<f64> {
        Self::axis(self.v_min, self.v_max, self.nv)
    }

    pub fn f_axis(&self) -> Vec<f64> {
        Self::axis(self.f_min, self.f_max, self.nf)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{},{}:{}:{}", self.v_min, self.v_max, self.nv, self.f_min, self.f_max, self.nf)
    }
}

/// Parses `v_min:v_max:nv,f_min:f_max:nf`.
impl FromStr for GridSpec {
    type Err = PredictError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PredictError::Grid(format!("expected v_min:v_max:nv,f_min:f_max:nf, got '{s}'"));
        let (v, f) = s.split_once(',').ok_or_else(bad)?;
        let parse_axis = |t: &str| -> Result<(f64, f64, usize), PredictError> {
            let parts: Vec<&str> = t.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok((
                parts[0].trim().parse().map_err(|_| bad())?,
                parts[1].trim().parse().map_err(|_| bad())?,
                parts[2].trim().parse().map_err(|_| bad())?,
            ))
        };
        let (v_min, v_max, nv) = parse_axis(v)?;
        let (f_min, f_max, nf) = parse_axis(f)?;
        let g = Self {
            v_min,
            v_max,
            nv,
            f_min,
            f_max,
            nf,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Predictive mean and sd over a regular grid. Node `(i, j)` sits at
/// `(v_axis[i], f_axis[j])` and is stored at `i * f_axis.len() + j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub v_axis: Vec<f64>,
    pub f_axis: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub channel: Channel,
}

impl SurfaceGrid {
    pub fn node_count(&self) -> usize {
        self.mean.len()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.f_axis.len() + j
    }

    pub fn mean_at(&self, i: usize, j: usize) -> f64 {
        self.mean[self.index(i, j)]
    }

    pub fn sd_at(&self, i: usize, j: usize) -> f64 {
        self.sd[self.index(i, j)]
    }

    /// `(v_c, f, mean, sd)` per node in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        self.v_axis.iter().enumerate().flat_map(move |(i, &v)| {
            self.f_axis
                .iter()
                .enumerate()
                .map(move |(j, &f)| (v, f, self.mean_at(i, j), self.sd_at(i, j)))
        })
    }

    /// The four corner nodes as `(v_c, f)`.
    pub fn corners(&self) -> [ControlPoint; 4] {
        let (v0, v1) = (self.v_axis[0], *self.v_axis.last().unwrap());
        let (f0, f1) = (self.f_axis[0], *self.f_axis.last().unwrap());
        [
            ControlPoint::new(v0, f0),
            ControlPoint::new(v0, f1),
            ControlPoint::new(v1, f0),
            ControlPoint::new(v1, f1),
        ]
    }
}

/// Tool-life fit: chains over the log-life GP, the conditioned posterior, and
/// the life surface over `grid` (training box at 20 × 20 when `None`).
#[derive(Clone, Debug)]
pub struct ToolLifeFit {
    pub chains: ChainSet,
    pub posterior: PosteriorGp,
    pub surface: SurfaceGrid,
    pub ids: Vec<u32>,
}

/// Experiments carrying a tool life, as (ids, settings, lives).
fn life_observations(experiments: &[ExperimentRecord]) -> Result<(Vec<u32>, Vec<ControlPoint>, Vec<f64>), PredictError> {
    let with_life: Vec<&ExperimentRecord> = experiments.iter().filter(|r| r.tool_life.is_some()).collect();
    if with_life.len() < 3 {
        return Err(PredictError::InsufficientData(format!(
            "tool-life GP needs at least 3 observations, got {}",
            with_life.len()
        )));
    }
    let life: Vec<f64> = with_life.iter().map(|r| r.tool_life.unwrap()).collect();
    if life.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(PredictError::Training("tool life must be positive".into()));
    }
    Ok((
        with_life.iter().map(|r| r.id).collect(),
        with_life.iter().map(|r| r.control).collect(),
        life,
    ))
}

/// Posterior draws of the log-life GP hyperparameters.
pub fn life_chains(
    experiments: &[ExperimentRecord],
    priors: &PriorConfig,
    sampler: &SamplerConfig,
    exec: Execution,
) -> Result<ChainSet, PredictError> {
    let (ids, controls, life) = life_observations(experiments)?;
    let log_life: Vec<f64> = life.iter().map(|l| l.ln()).collect();
    let model = GpResponseModel::new(ids, &controls, &log_life, *priors)?;
    Ok(run_chains(&model, sampler, exec)?)
}

pub fn fit_tool_life(
    experiments: &[ExperimentRecord],
    priors: &PriorConfig,
    sampler: &SamplerConfig,
    grid: Option<&GridSpec>,
    exec: Execution,
) -> Result<ToolLifeFit, PredictError> {
    let (ids, controls, life) = life_observations(experiments)?;
    let chains = life_chains(experiments, priors, sampler, exec)?;
    let posterior = PosteriorGp::from_life(&chains, &controls, &life, exec)?;
    let grid = grid.copied().unwrap_or_else(|| GridSpec::covering(&controls));
    let surface = posterior.surface(&grid, Channel::Life, DEFAULT_EXTRAPOLATION_MARGIN, exec)?;
    Ok(ToolLifeFit {
        chains,
        posterior,
        surface,
        ids,
    })
}

/// Taylor's tool-life relation `v_c T^n = C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorFit {
    pub n: f64,
    pub c: f64,
    /// Residual sd of `ln v_c` (zero with two points).
    pub residual_sd: f64,
}

impl TaylorFit {
    /// Tool life predicted at cutting speed `v_c`.
    pub fn life_at(&self, v_c: f64) -> f64 {
        (self.c / v_c).powf(1.0 / self.n)
    }
}

/// Least squares of `ln v_c = ln C − n ln T` over `(v_c, T)` pairs.
pub fn fit_taylor(pairs: &[(f64, f64)]) -> Result<TaylorFit, PredictError> {
    if pairs.len() < 2 {
        return Err(PredictError::TaylorDegenerate(format!("need at least 2 pairs, got {}", pairs.len())));
    }
    if let Some(&(v, t)) = pairs.iter().find(|(v, t)| !(v.is_finite() && t.is_finite() && *v > 0.0 && *t > 0.0)) {
        return Err(PredictError::TaylorDomain(format!("speed {v} and life {t} must both be positive")));
    }
    let first_v = pairs[0].0;
    if pairs.iter().all(|p| p.0 == first_v) {
        return Err(PredictError::TaylorDegenerate("all cutting speeds are equal".into()));
    }
    let first_t = pairs[0].1;
    if pairs.iter().all(|p| p.1 == first_t) {
        return Err(PredictError::TaylorDegenerate("all tool lives are equal".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let m = xs.len() as f64;
    let x_bar = xs.iter().sum::<f64>() / m;
    let y_bar = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - x_bar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_bar) * (y - y_bar)).sum();
    let slope = sxy / sxx;
    let intercept = y_bar - slope * x_bar;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(TaylorFit {
        n: -slope,
        c: intercept.exp(),
        residual_sd: if pairs.len() > 2 { (rss / (m - 2.0)).sqrt() } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;

    #[test]
    fn interpolates_noiseless_training_point() {
        let train = [ControlPoint::new(0.0, 0.0), ControlPoint::new(1.0, 0.5), ControlPoint::new(-0.7, 1.2)];
        let cfg = KernelConfig::new(1.0, 1.0, 1.0, 1e-300).unwrap();
        let beta = [1.0, 2.0, -0.5];
        for (i, p) in train.iter().enumerate() {
            let (m, v) = gp_conditional(&beta, 0.3, &cfg, &train, p).unwrap();
            assert!((m - beta[i]).abs() < 1e-8);
            assert!(v.abs() < 1e-8);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let train = [ControlPoint::new(0.0, 0.0), ControlPoint::new(1.0, 0.5)];
        let cfg = KernelConfig::new(2.0, 1.0, 1.0, 0.3).unwrap();
        let (m, v) = gp_conditional(&[1.0, 2.0], 0.7, &cfg, &train, &ControlPoint::new(1e3, 1e3)).unwrap();
        assert_eq!(m, 0.7);
        assert_relative_eq!(v, 2.3, max_relative = 1e-14);
    }

    #[test]
    fn two_point_hand_solution() {
        let train = [ControlPoint::new(0.0, 0.0), ControlPoint::new(1.0, 0.0)];
        let cfg = KernelConfig::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let star = ControlPoint::new(0.5, 0.0);
        let e1 = (-1.0f64).exp();
        let jitter = 1e-10;
        let sigma = Matrix2::new(2.0 + jitter, e1, e1, 2.0 + jitter);
        let inv = sigma.try_inverse().unwrap();
        let k = nalgebra::Vector2::new((-0.25f64).exp(), (-0.25f64).exp());
        let r = nalgebra::Vector2::new(1.0, 2.0);
        let mean = k.dot(&(inv * r));
        let var = 2.0 - k.dot(&(inv * k));
        let (m, v) = gp_conditional(&[1.0, 2.0], 0.0, &cfg, &train, &star).unwrap();
        assert_relative_eq!(m, mean, max_relative = 1e-12);
        assert_relative_eq!(v, var, max_relative = 1e-12);
    }

    #[test]
    fn mean_is_affine_in_values() {
        let train = [ControlPoint::new(0.0, 0.0), ControlPoint::new(0.8, 0.1), ControlPoint::new(0.2, 1.0)];
        let cfg = KernelConfig::new(1.5, 0.7, 1.3, 0.2).unwrap();
        let mu = 0.4;
        let beta = [1.0, -2.0, 0.5];
        let mirrored: Vec<f64> = beta.iter().map(|b| 2.0 * b - mu).collect();
        let shifted: Vec<f64> = beta.iter().map(|b| 2.0 * mu - b).collect();
        let star = ControlPoint::new(0.3, 0.4);
        let (m1, _) = gp_conditional(&mirrored, mu, &cfg, &train, &star).unwrap();
        let (m0, _) = gp_conditional(&beta, mu, &cfg, &train, &star).unwrap();
        let (m2, _) = gp_conditional(&shifted, mu, &cfg, &train, &star).unwrap();
        // conditioning on μ ± (β − μ)·c gives means symmetric about μ
        assert_relative_eq!(m1 - mu, 2.0 * (m0 - mu), max_relative = 1e-12);
        assert_relative_eq!(m2 - mu, -(m0 - mu), max_relative = 1e-12);
    }

    #[test]
    fn variance_bounded_by_prior() {
        let train: Vec<_> = (0..6).map(|i| ControlPoint::new(i as f64 * 0.3, (i as f64).cos())).collect();
        let cfg = KernelConfig::new(1.2, 2.0, 0.5, 0.05).unwrap();
        let beta = vec![0.0; 6];
        for s in 0..50 {
            let star = ControlPoint::new(s as f64 * 0.05 - 0.5, (s as f64 * 0.37).sin());
            let (_, v) = gp_conditional(&beta, 0.0, &cfg, &train, &star).unwrap();
            assert!(v >= 0.0 && v <= cfg.total_variance() + 1e-15);
        }
    }

    #[test]
    fn grid_parsing_and_axes() {
        let g: GridSpec = "20:60:20,20:50:20".parse().unwrap();
        assert_eq!(g.node_count(), 400);
        let ax = g.v_axis();
        assert_eq!((ax[0], ax[19]), (20.0, 60.0));
        let small: GridSpec = "1:2:2,3:4:2".parse().unwrap();
        assert_eq!(small.v_axis(), vec![1.0, 2.0]);
        assert!("1:2:1,3:4:2".parse::<GridSpec>().is_err());
        assert!("1:2,3:4:2".parse::<GridSpec>().is_err());
        assert!("2:1:5,3:4:2".parse::<GridSpec>().is_err());
        assert_eq!(g.to_string().parse::<GridSpec>().unwrap(), g);
    }

    #[test]
    fn taylor_noiseless_recovery() {
        let (n, c) = (0.25, 100.0);
        let pairs: Vec<(f64, f64)> = [5.0, 20.0, 80.0, 200.0]
            .iter()
            .map(|&t: &f64| (c / t.powf(n), t))
            .collect();
        let fit = fit_taylor(&pairs).unwrap();
        assert!((fit.n - n).abs() < 1e-10);
        assert!((fit.c - c).abs() < 1e-10 * c);
        assert!(fit.residual_sd < 1e-10);
    }

    #[test]
    fn taylor_two_point_closed_form() {
        let fit = fit_taylor(&[(20.0, 255.0), (58.0, 10.0)]).unwrap();
        let n = (58.0f64 / 20.0).ln() / (255.0f64 / 10.0).ln();
        assert_relative_eq!(fit.n, n, max_relative = 1e-12);
        assert_relative_eq!(fit.n, 0.3287, epsilon = 1e-4);
        assert_relative_eq!(fit.c, 20.0 * 255f64.powf(n), max_relative = 1e-12);
        let replicated = fit_taylor(&[(20.0, 255.0), (58.0, 10.0), (58.0, 10.0)]).unwrap();
        assert_relative_eq!(replicated.n, fit.n, max_relative = 1e-12);
        assert_relative_eq!(replicated.c, fit.c, max_relative = 1e-12);
        assert_relative_eq!(fit.life_at(20.0), 255.0, max_relative = 1e-12);
    }

    #[test]
    fn taylor_errors() {
        assert!(matches!(fit_taylor(&[(20.0, 0.0), (30.0, 5.0)]), Err(PredictError::TaylorDomain(_))));
        assert!(matches!(fit_taylor(&[(-1.0, 3.0), (30.0, 5.0)]), Err(PredictError::TaylorDomain(_))));
        assert!(matches!(fit_taylor(&[(20.0, 3.0), (20.0, 5.0)]), Err(PredictError::TaylorDegenerate(_))));
        assert!(matches!(fit_taylor(&[(20.0, 3.0)]), Err(PredictError::TaylorDegenerate(_))));
    }
}
