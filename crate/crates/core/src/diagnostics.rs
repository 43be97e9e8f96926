//! Split potential scale reduction and posterior summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::sampler::ChainSet;

/// Parameters above this PSRF are flagged as unconverged.
pub const PSRF_THRESHOLD: f64 = 1.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("PSRF needs at least 2 chains, got {0}")]
    TooFewChains(usize),
    #[error("PSRF needs at least 4 draws per chain, got {0}")]
    TooFewDraws(usize),
    #[error("chains have different lengths")]
    Ragged,
    #[error("no retained draws to summarize")]
    Empty,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Split-chain PSRF of one parameter given `m` chains of `n` draws.
///
/// Each chain is cut into halves of `h = ⌊n/2⌋` draws (the middle draw of an
/// odd-length chain is dropped). With `W` the mean within-sequence variance and
/// `B = h · var(sequence means)`, the result is
/// `sqrt(((h − 1)/h · W + B/h) / W)`.
pub fn psrf(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let m = chains.len();
    if m < 2 {
        return Err(DiagnosticsError::TooFewChains(m));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticsError::Ragged);
    }
    if n < 4 {
        return Err(DiagnosticsError::TooFewDraws(n));
    }
    let h = n / 2;
    let halves: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..h], &c[n - h..]]).collect();
    let means: Vec<f64> = halves.iter().map(|s| mean(s)).collect();
    let w = mean(&halves.iter().map(|s| sample_var(s)).collect::<Vec<_>>());
    let b = h as f64 * sample_var(&means);
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let hf = h as f64;
    Ok((((hf - 1.0) / hf * w + b / hf) / w).sqrt())
}

/// Linear interpolation between order statistics (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    /// `None` when there are too few draws for a PSRF.
    pub psrf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub divergences: usize,
    pub mean_accept: f64,
    pub step_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub params: Vec<ParamSummary>,
    pub chains: Vec<ChainSummary>,
}

impl FitSummary {
    pub fn max_psrf(&self) -> Option<f64> {
        self.params.iter().filter_map(|p| p.psrf).reduce(f64::max)
    }

    /// Parameters whose PSRF exceeds `threshold` (or is not finite).
    pub fn unconverged(&self, threshold: f64) -> Vec<&ParamSummary> {
        self.params
            .iter()
            .filter(|p| p.psrf.is_some_and(|r| !(r <= threshold)))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Pooled moments and quantiles of one parameter across chains.
pub fn summarize_param(name: &str, chains: &[Vec<f64>]) -> Result<ParamSummary, DiagnosticsError> {
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mean_v = mean(&pooled);
    let sd = if pooled.len() > 1 { sample_var(&pooled).sqrt() } else { 0.0 };
    pooled.sort_by(f64::total_cmp);
    Ok(ParamSummary {
        name: name.to_string(),
        mean: mean_v,
        sd,
        q025: quantile_sorted(&pooled, 0.025),
        q50: quantile_sorted(&pooled, 0.5),
        q975: quantile_sorted(&pooled, 0.975),
        psrf: psrf(chains).ok(),
    })
}

pub fn summarize(chains: &ChainSet) -> Result<FitSummary, DiagnosticsError> {
    summarize_with(chains, Execution::default())
}

/// [`summarize`] with an explicit execution policy (parameters are reduced
/// independently).
pub fn summarize_with(chains: &ChainSet, exec: Execution) -> Result<FitSummary, DiagnosticsError> {
    if chains.n_retained == 0 || chains.draws.iter().all(|c| c.is_empty()) {
        return Err(DiagnosticsError::Empty);
    }
    let params = exec
        .map_indexed(chains.n_params(), |j| summarize_param(&chains.param_names[j], &chains.param_chains(j)))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let per_chain = (0..chains.n_chains())
        .map(|c| ChainSummary {
            chain: c,
            divergences: chains.divergences.get(c).copied().unwrap_or(0),
            mean_accept: chains.accept_stats.get(c).copied().unwrap_or(f64::NAN),
            step_size: chains.step_sizes.get(c).copied().unwrap_or(f64::NAN),
        })
        .collect();
    Ok(FitSummary {
        params,
        chains: per_chain,
    })
}
