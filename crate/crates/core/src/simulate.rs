//! Synthetic experiments with known ground truth.
//!
//! Settings come from the Sobol design. Slopes are one draw of the slope GP
//! over the standardized settings; intercepts are normal; every series is the
//! linear model plus Gaussian noise. Raw traces interleave contact phases with
//! near-zero air cuts so segmentation can be exercised end to end.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ControlPoint, ExperimentRecord, ExperimentSeries, ForceChannel};
use crate::design::{augmentation_plan, DesignBounds, DesignError};
use crate::kernel::{CovFactor, KernelConfig, KernelError, Standardizer};
use crate::segmentation::{RawTrace, SegmentationError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Trace(#[from] SegmentationError),
    #[error("invalid simulation settings: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_experiments: usize,
    pub bounds: DesignBounds,
    /// Slope GP on standardized settings.
    pub kernel: KernelConfig,
    pub mu_beta: f64,
    pub alpha_mean: f64,
    pub alpha_sd: f64,
    /// Residual sd of every series.
    pub sigma: f64,
    pub n_points: usize,
    /// Cutting length (m) at the last point of every series.
    pub max_length: f64,
    /// Ft, Ff, Fp as multiples of the simulated force.
    pub channel_scale: [f64; 3],
    /// Contact phases per raw trace; `n_points` must divide evenly.
    pub passes: usize,
    /// Air-cut samples between passes (and at both ends).
    pub gap_samples: usize,
    pub gap_sd: f64,
    /// Tool life `T = T₀ (v₀/v)^{1/n} (f₀/f)^{b}` with log-normal noise.
    pub life: LifeLaw,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifeLaw {
    pub t0: f64,
    pub v0: f64,
    pub f0: f64,
    pub taylor_n: f64,
    pub feed_exponent: f64,
    pub log_sd: f64,
}

impl Default for LifeLaw {
    fn default() -> Self {
        Self {
            t0: 255.0,
            v0: 20.0,
            f0: 45.0,
            taylor_n: 0.33,
            feed_exponent: 0.5,
            log_sd: 0.1,
        }
    }
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_experiments: 21,
            bounds: DesignBounds {
                v_min: 20.0,
                v_max: 60.0,
                f_min: 20.0,
                f_max: 50.0,
            },
            kernel: KernelConfig {
                eta_sq: 4.0,
                rho1: 1.0,
                rho2: 1.0,
                sigma_b_sq: 0.01,
            },
            mu_beta: 3.0,
            alpha_mean: 200.0,
            alpha_sd: 10.0,
            sigma: 5.0,
            n_points: 50,
            max_length: 20.0,
            channel_scale: [1.0, 0.6, 0.4],
            passes: 2,
            gap_samples: 30,
            gap_sd: 1.0,
            life: LifeLaw::default(),
            seed: 20,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        self.bounds.validate()?;
        self.kernel.validate()?;
        let bad = |m: &str| Err(SimulationError::Config(m.to_string()));
        if self.n_experiments < 2 {
            return bad("need at least 2 experiments");
        }
        if self.n_points < 2 {
            return bad("need at least 2 points per series");
        }
        if self.passes == 0 || !self.n_points.is_multiple_of(self.passes) {
            return bad("passes must divide n_points");
        }
        let positive = [self.sigma, self.alpha_sd, self.max_length, self.gap_sd];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return bad("sigma, alpha_sd, max_length and gap_sd must be positive");
        }
        if self.channel_scale.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return bad("channel scales must be positive");
        }
        Ok(())
    }
}

/// Generating values of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub id: u32,
    pub control: ControlPoint,
    /// Per channel in Ft, Ff, Fp order.
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub tool_life: f64,
}

impl TrueParams {
    pub fn beta_for(&self, channel: ForceChannel) -> f64 {
        self.beta[channel_index(channel)]
    }

    pub fn alpha_for(&self, channel: ForceChannel) -> f64 {
        self.alpha[channel_index(channel)]
    }
}

fn channel_index(channel: ForceChannel) -> usize {
    match channel {
        ForceChannel::Ft => 0,
        ForceChannel::Ff => 1,
        ForceChannel::Fp => 2,
    }
}

#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub records: Vec<ExperimentRecord>,
    pub traces: Vec<RawTrace>,
    pub truth: Vec<TrueParams>,
}

/// Experiments at the first `n_experiments` Sobol design points.
pub fn simulate(cfg: &SimulationConfig) -> Result<SimulatedData, SimulationError> {
    cfg.validate()?;
    let plan = augmentation_plan(&cfg.bounds, cfg.n_experiments, 0)?;
    let controls: Vec<ControlPoint> = plan.initial.iter().map(|p| ControlPoint::new(p.v_c, p.f)).collect();
    simulate_at(cfg, &controls)
}

/// Experiments at the given settings, numbered from 1; `n_experiments` and
/// `bounds` are ignored.
pub fn simulate_at(cfg: &SimulationConfig, controls: &[ControlPoint]) -> Result<SimulatedData, SimulationError> {
    SimulationConfig {
        n_experiments: controls.len(),
        ..cfg.clone()
    }
    .validate()?;
    if controls.iter().any(|c| !(c.is_finite() && c.v_c > 0.0 && c.f > 0.0)) {
        return Err(SimulationError::Config("settings must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_points = Standardizer::fit(controls).apply_all(controls);

    let k = controls.len();
    let factor = CovFactor::new(&std_points, &cfg.kernel)?;
    let z = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(&mut rng)));
    let beta = factor.mul_l(&z).add_scalar(cfg.mu_beta);
    let alpha_dist = Normal::new(cfg.alpha_mean, cfg.alpha_sd).map_err(|e| SimulationError::Config(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| SimulationError::Config(e.to_string()))?;
    let gap = Normal::new(0.0, cfg.gap_sd).map_err(|e| SimulationError::Config(e.to_string()))?;
    let life_noise = Normal::new(0.0, cfg.life.log_sd.max(0.0)).map_err(|e| SimulationError::Config(e.to_string()))?;

    let step = cfg.max_length / cfg.n_points as f64;
    let length: Vec<f64> = (1..=cfg.n_points).map(|j| j as f64 * step).collect();
    let per_pass = cfg.n_points / cfg.passes;

    let mut records = Vec::with_capacity(k);
    let mut traces = Vec::with_capacity(k);
    let mut truth = Vec::with_capacity(k);
    for (i, c) in controls.iter().enumerate() {
        let id = i as u32 + 1;
        let base_alpha = alpha_dist.sample(&mut rng);
        let alpha = cfg.channel_scale.map(|s| s * base_alpha);
        let slopes = cfg.channel_scale.map(|s| s * beta[i]);
        let forces: Vec<Vec<f64>> = (0..3)
            .map(|ch| length.iter().map(|l| alpha[ch] + slopes[ch] * l + noise.sample(&mut rng)).collect())
            .collect();

        // air cut, pass, air cut, pass, ..., air cut
        let mut raw: [Vec<f64>; 3] = Default::default();
        for pass in 0..=cfg.passes {
            for ch in raw.iter_mut() {
                ch.extend((0..cfg.gap_samples).map(|_| gap.sample(&mut rng)));
            }
            if pass < cfg.passes {
                for (ch, f) in raw.iter_mut().zip(&forces) {
                    ch.extend_from_slice(&f[pass * per_pass..(pass + 1) * per_pass]);
                }
            }
        }
        let [ft, ff, fp] = raw;
        let n = ft.len() as u64;
        traces.push(RawTrace::new((0..n).collect(), ft, ff, fp, step)?);

        let ln_life = cfg.life.t0.ln() + (cfg.life.v0 / c.v_c).ln() / cfg.life.taylor_n
            + cfg.life.feed_exponent * (cfg.life.f0 / c.f).ln()
            + life_noise.sample(&mut rng);
        let tool_life = ln_life.exp();

        let mut it = forces.into_iter();
        records.push(ExperimentRecord {
            id,
            control: *c,
            series: ExperimentSeries {
                length: length.clone(),
                ft: it.next().unwrap(),
                ff: it.next().unwrap(),
                fp: it.next().unwrap(),
            },
            tool_life: Some(tool_life),
        });
        truth.push(TrueParams {
            id,
            control: *c,
            alpha,
            beta: slopes,
            tool_life,
        });
    }
    Ok(SimulatedData { records, traces, truth })
}
