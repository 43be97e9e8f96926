//! No-U-Turn Hamiltonian Monte Carlo.
//!
//! Multinomial trajectory sampling with the generalized U-turn check across
//! subtrees, a diagonal metric, and windowed warmup: a fast step-size phase, a
//! sequence of doubling windows that estimate the metric, and a final
//! step-size phase. Step sizes are tuned by Nesterov dual averaging.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

/// Energy error beyond which a trajectory is declared divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density at `x`, writing the gradient into `grad`. Points outside
    /// the support return `-inf` (the gradient is then ignored).
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Map an unconstrained point to the reported (constrained) quantities.
    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("chain {0}: no finite initial point after 100 attempts")]
    Initialization(usize),
    #[error("chain {0}: step-size search left the range (0, 1e7)")]
    StepSize(usize),
    #[error("every post-warmup transition diverged")]
    AllDivergent,
}

/// Position, momentum and cached density of a Hamiltonian state.
#[derive(Clone, Debug)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub log_density: f64,
}

impl PhasePoint {
    pub fn new<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>, p: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let log_density = target.log_density_grad(&q, &mut grad);
        Self { q, p, grad, log_density }
    }

    pub fn kinetic(&self, inv_metric: &[f64]) -> f64 {
        0.5 * self.p.iter().zip(inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    /// Total energy; `+inf` outside the support.
    pub fn hamiltonian(&self, inv_metric: &[f64]) -> f64 {
        let h = -self.log_density + self.kinetic(inv_metric);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn velocity(&self, inv_metric: &[f64]) -> Vec<f64> {
        self.p.iter().zip(inv_metric).map(|(p, m)| p * m).collect()
    }
}

/// One leapfrog step of size `step` (negative to integrate backwards): half
/// kick, drift, half kick. Returns `false` when the new state has a
/// non-finite density or gradient.
pub fn leapfrog<T: LogDensity + ?Sized>(target: &T, z: &mut PhasePoint, step: f64, inv_metric: &[f64]) -> bool {
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * step * g;
    }
    for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(inv_metric) {
        *q += step * m * p;
    }
    z.log_density = target.log_density_grad(&z.q, &mut z.grad);
    let finite = z.log_density.is_finite() && z.grad.iter().all(|g| g.is_finite());
    if finite {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * step * g;
        }
    }
    finite
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    /// Mean Metropolis acceptance over the trajectory.
    pub accept_stat: f64,
    pub n_leapfrog: usize,
    pub depth: usize,
    pub divergent: bool,
    pub energy: f64,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// No U-turn between the two trajectory ends for summed momentum `rho`.
fn no_u_turn(v_minus: &[f64], v_plus: &[f64], rho: &[f64]) -> bool {
    dot(v_plus, rho) > 0.0 && dot(v_minus, rho) > 0.0
}

struct TreeBuilder<'a, T: ?Sized, R> {
    target: &'a T,
    inv_metric: &'a [f64],
    step: f64,
    rng: &'a mut R,
    h0: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<T: LogDensity + ?Sized, R: Rng> TreeBuilder<'_, T, R> {
    /// Extend `z` by `2^depth` leapfrog steps in direction `sign`.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        depth: usize,
        z: &mut PhasePoint,
        z_propose: &mut PhasePoint,
        v_beg: &mut Vec<f64>,
        v_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            let finite = leapfrog(self.target, z, sign * self.step, self.inv_metric);
            self.n_leapfrog += 1;
            let h = if finite { z.hamiltonian(self.inv_metric) } else { f64::INFINITY };
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            let log_w = self.h0 - h;
            *log_sum_weight = log_sum_exp(*log_sum_weight, log_w);
            self.sum_metro_prob += if log_w > 0.0 { 1.0 } else { log_w.exp() };
            z_propose.clone_from(z);
            *v_beg = z.velocity(self.inv_metric);
            v_end.clone_from(v_beg);
            add_assign(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut v_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let valid_init = self.build(
            depth - 1,
            z,
            z_propose,
            v_beg,
            &mut v_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            sign,
            &mut lsw_init,
        );
        if !valid_init {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut v_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let valid_final = self.build(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut v_final_beg,
            v_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            sign,
            &mut lsw_final,
        );
        if !valid_final {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree || self.rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            std::mem::swap(z_propose, &mut z_propose_final);
        }

        let rho_subtree = add(&rho_init, &rho_final);
        add_assign(rho, &rho_subtree);
        let mut persist = no_u_turn(v_beg, v_end, &rho_subtree);
        persist &= no_u_turn(v_beg, &v_final_beg, &add(&rho_init, &p_final_beg));
        persist &= no_u_turn(&v_init_end, v_end, &add(&rho_final, &p_init_end));
        persist
    }
}

fn sample_momentum<R: Rng>(rng: &mut R, inv_metric: &[f64]) -> Vec<f64> {
    inv_metric
        .iter()
        .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
        .collect()
}

/// One NUTS transition from `current` (its momentum is resampled).
///
/// A `max_tree_depth` of 0 is treated like 1: a single leapfrog proposal.
pub fn nuts_transition<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    current: &PhasePoint,
    inv_metric: &[f64],
    step_size: f64,
    max_tree_depth: usize,
    rng: &mut R,
) -> (PhasePoint, TransitionStats) {
    let max_depth = max_tree_depth.max(1);
    let mut z0 = current.clone();
    z0.p = sample_momentum(rng, inv_metric);
    let h0 = z0.hamiltonian(inv_metric);
    let v0 = z0.velocity(inv_metric);

    let mut z_fwd = z0.clone();
    let mut z_bck = z0.clone();
    let mut z_sample = z0.clone();
    let mut z_propose = z0.clone();

    let (mut p_fwd_fwd, mut p_fwd_bck, mut p_bck_fwd, mut p_bck_bck) =
        (z0.p.clone(), z0.p.clone(), z0.p.clone(), z0.p.clone());
    let (mut v_fwd_fwd, mut v_fwd_bck, mut v_bck_fwd, mut v_bck_bck) = (v0.clone(), v0.clone(), v0.clone(), v0);
    let mut rho = z0.p.clone();
    let mut log_sum_weight = 0.0;
    let dim = rho.len();

    let mut builder = TreeBuilder {
        target,
        inv_metric,
        step: step_size,
        rng,
        h0,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    let mut depth = 0;
    while depth < max_depth {
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid = if builder.rng.random::<bool>() {
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_fwd);
            v_bck_fwd.clone_from(&v_fwd_fwd);
            builder.build(
                depth,
                &mut z_fwd,
                &mut z_propose,
                &mut v_fwd_bck,
                &mut v_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                1.0,
                &mut lsw_subtree,
            )
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_bck);
            v_fwd_bck.clone_from(&v_bck_bck);
            builder.build(
                depth,
                &mut z_bck,
                &mut z_propose,
                &mut v_bck_fwd,
                &mut v_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                -1.0,
                &mut lsw_subtree,
            )
        };
        if !valid {
            break;
        }
        depth += 1;

        if lsw_subtree > log_sum_weight || builder.rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
            z_sample.clone_from(&z_propose);
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

        rho = add(&rho_bck, &rho_fwd);
        let mut persist = no_u_turn(&v_bck_bck, &v_fwd_fwd, &rho);
        persist &= no_u_turn(&v_bck_bck, &v_fwd_bck, &add(&rho_bck, &p_fwd_bck));
        persist &= no_u_turn(&v_bck_fwd, &v_fwd_fwd, &add(&rho_fwd, &p_bck_fwd));
        if !persist {
            break;
        }
    }

    let stats = TransitionStats {
        accept_stat: builder.sum_metro_prob / builder.n_leapfrog.max(1) as f64,
        n_leapfrog: builder.n_leapfrog,
        depth,
        divergent: builder.divergent,
        energy: z_sample.hamiltonian(inv_metric),
    };
    (z_sample, stats)
}

/// Nesterov dual averaging of the log step size toward a target acceptance.
#[derive(Clone, Debug)]
pub struct DualAveraging {
    target: f64,
    mu: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(initial_step: f64, target_accept: f64) -> Self {
        let mut da = Self {
            target: target_accept,
            mu: 0.0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        };
        da.restart(initial_step);
        da
    }

    /// Re-center on `step` and forget the history.
    pub fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Feed one acceptance statistic, returning the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let a = if a.is_nan() { 0.0 } else { a };
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    /// Step size to freeze at the end of warmup.
    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Step-size schedule produced by dual averaging over an acceptance history.
pub fn adapt_step_size(initial_step: f64, history: &[f64], target_accept: f64) -> Vec<f64> {
    let mut da = DualAveraging::new(initial_step, target_accept);
    history.iter().map(|&a| da.update(a)).collect()
}

/// Window schedule for metric estimation during warmup.
#[derive(Clone, Debug)]
struct Windows {
    n_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window_end: usize,
    counter: usize,
}

impl Windows {
    fn new(n_warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        if n_warmup < 20 {
            // too short to learn a metric
            return Self {
                n_warmup,
                init_buffer: n_warmup,
                term_buffer: 0,
                window_size: 0,
                next_window_end: usize::MAX,
                counter: 0,
            };
        }
        if init_buffer + base + term_buffer > n_warmup {
            init_buffer = (0.15 * n_warmup as f64) as usize;
            term_buffer = (0.1 * n_warmup as f64) as usize;
            base = n_warmup - (init_buffer + term_buffer);
        }
        Self {
            n_warmup,
            init_buffer,
            term_buffer,
            window_size: base,
            next_window_end: init_buffer + base - 1,
            counter: 0,
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.n_warmup - self.term_buffer
            && self.counter != self.n_warmup
    }

    fn at_window_end(&self) -> bool {
        self.counter == self.next_window_end && self.counter != self.n_warmup
    }

    fn advance_window(&mut self) {
        let last = self.n_warmup - self.term_buffer - 1;
        if self.next_window_end == last {
            return;
        }
        self.window_size *= 2;
        self.next_window_end = self.counter + self.window_size;
        if self.next_window_end != last && self.next_window_end + 2 * self.window_size >= self.n_warmup - self.term_buffer {
            self.next_window_end = last;
        }
    }
}

/// Welford accumulator for the diagonal metric.
#[derive(Clone, Debug)]
struct VarianceEstimator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceEstimator {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n as f64;
            *s += d * (v - *m);
        }
    }

    /// Sample variance shrunk toward 1e-3.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    pub max_tree_depth: usize,
    pub target_accept: f64,
    pub seed: u64,
    /// Initial unconstrained coordinates are uniform on `[-r, r]`.
    pub init_radius: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1000,
            n_samples: 1000,
            max_tree_depth: 10,
            target_accept: 0.8,
            seed: 1,
            init_radius: 2.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_chains < 2 {
            return Err(SamplerError::Config("at least 2 chains are required".into()));
        }
        if self.n_samples < 1 {
            return Err(SamplerError::Config("at least 1 retained draw is required".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::Config("target acceptance must lie in (0, 1)".into()));
        }
        if !(self.init_radius.is_finite() && self.init_radius >= 0.0) {
            return Err(SamplerError::Config("init radius must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Retained draws of several chains, on the constrained scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSet {
    pub param_names: Vec<String>,
    /// `[chain][iteration][parameter]`.
    pub draws: Vec<Vec<Vec<f64>>>,
    pub n_warmup: usize,
    pub n_retained: usize,
    pub seed: u64,
    /// Mean acceptance statistic per chain over retained iterations.
    pub accept_stats: Vec<f64>,
    /// Divergent retained transitions per chain.
    pub divergences: Vec<usize>,
    /// Adapted step size per chain.
    pub step_sizes: Vec<f64>,
}

impl ChainSet {
    pub fn n_chains(&self) -> usize {
        self.draws.len()
    }

    pub fn n_params(&self) -> usize {
        self.param_names.len()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// `[chain][iteration]` draws of one parameter.
    pub fn param_chains(&self, index: usize) -> Vec<Vec<f64>> {
        self.draws
            .iter()
            .map(|c| c.iter().map(|d| d[index]).collect())
            .collect()
    }

    /// Every retained draw, chain-major.
    pub fn flat_draws(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.draws.iter().flatten()
    }

    pub fn total_divergences(&self) -> usize {
        self.divergences.iter().sum()
    }

    /// Fraction of retained transitions that diverged.
    pub fn divergence_rate(&self) -> f64 {
        let total = (self.n_chains() * self.n_retained).max(1);
        self.total_divergences() as f64 / total as f64
    }

    /// True when more than 10 % of retained transitions diverged.
    pub fn divergence_warning(&self) -> bool {
        self.divergence_rate() > 0.1
    }
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    accept: f64,
    divergences: usize,
    step: f64,
}

/// Doubling/halving search for a step size whose single-step acceptance
/// crosses 0.8.
fn initial_step_size<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    z: &PhasePoint,
    inv_metric: &[f64],
    mut step: f64,
    rng: &mut R,
) -> Option<f64> {
    let threshold = 0.8f64.ln();
    let trial = |step: f64, rng: &mut R| {
        let mut w = z.clone();
        w.p = sample_momentum(rng, inv_metric);
        let h0 = w.hamiltonian(inv_metric);
        let h = if leapfrog(target, &mut w, step, inv_metric) {
            w.hamiltonian(inv_metric)
        } else {
            f64::INFINITY
        };
        h0 - h
    };
    let direction = if trial(step, rng) > threshold { 1 } else { -1 };
    for _ in 0..200 {
        let delta = trial(step, rng);
        if (direction == 1 && !(delta > threshold)) || (direction == -1 && !(delta < threshold)) {
            return Some(step);
        }
        step = if direction == 1 { 2.0 * step } else { 0.5 * step };
        if step > 1e7 || step == 0.0 {
            return None;
        }
    }
    Some(step)
}

fn run_chain<T: LogDensity + ?Sized>(target: &T, cfg: &SamplerConfig, chain: usize) -> Result<ChainOutput, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let dim = target.dim();

    let mut z = None;
    for _ in 0..100 {
        let q: Vec<f64> = (0..dim)
            .map(|_| cfg.init_radius * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        let cand = PhasePoint::new(target, q, vec![0.0; dim]);
        if cand.log_density.is_finite() && cand.grad.iter().all(|g| g.is_finite()) {
            z = Some(cand);
            break;
        }
    }
    let mut z = z.ok_or(SamplerError::Initialization(chain))?;

    let mut inv_metric = vec![1.0; dim];
    let mut step = initial_step_size(target, &z, &inv_metric, 1.0, &mut rng).ok_or(SamplerError::StepSize(chain))?;
    let mut da = DualAveraging::new(step, cfg.target_accept);
    let mut windows = Windows::new(cfg.n_warmup);
    let mut var = VarianceEstimator::new(dim);

    for _ in 0..cfg.n_warmup {
        let (next, stats) = nuts_transition(target, &z, &inv_metric, step, cfg.max_tree_depth, &mut rng);
        z = next;
        step = da.update(stats.accept_stat);
        if windows.in_window() {
            var.add(&z.q);
        }
        if windows.at_window_end() {
            windows.advance_window();
            inv_metric = var.regularized();
            var = VarianceEstimator::new(dim);
            // the cached gradient is metric-independent; only the step needs a restart
            step = initial_step_size(target, &z, &inv_metric, step, &mut rng).ok_or(SamplerError::StepSize(chain))?;
            da.restart(step);
        }
        windows.counter += 1;
    }
    if cfg.n_warmup > 0 {
        step = da.final_step();
    }

    let mut draws = Vec::with_capacity(cfg.n_samples);
    let mut accept = 0.0;
    let mut divergences = 0;
    for _ in 0..cfg.n_samples {
        let (next, stats) = nuts_transition(target, &z, &inv_metric, step, cfg.max_tree_depth, &mut rng);
        z = next;
        accept += stats.accept_stat;
        divergences += stats.divergent as usize;
        draws.push(target.constrain(&z.q));
    }
    Ok(ChainOutput {
        draws,
        accept: accept / cfg.n_samples as f64,
        divergences,
        step,
    })
}

/// Run `cfg.n_chains` independent chains. Chain `c` uses stream `c` of a
/// ChaCha generator seeded with `cfg.seed`, so the result does not depend on
/// scheduling.
pub fn run_chains<T: LogDensity + ?Sized>(target: &T, cfg: &SamplerConfig, exec: Execution) -> Result<ChainSet, SamplerError> {
    cfg.validate()?;
    let outputs = exec
        .map_indexed(cfg.n_chains, |c| run_chain(target, cfg, c))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let set = ChainSet {
        param_names: target.param_names(),
        n_warmup: cfg.n_warmup,
        n_retained: cfg.n_samples,
        seed: cfg.seed,
        accept_stats: outputs.iter().map(|o| o.accept).collect(),
        divergences: outputs.iter().map(|o| o.divergences).collect(),
        step_sizes: outputs.iter().map(|o| o.step).collect(),
        draws: outputs.into_iter().map(|o| o.draws).collect(),
    };
    if set.total_divergences() == set.n_chains() * set.n_retained {
        return Err(SamplerError::AllDivergent);
    }
    if set.divergence_warning() {
        log::warn!(
            "{:.1}% of post-warmup transitions diverged",
            100.0 * set.divergence_rate()
        );
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Free(usize);
    impl LogDensity for Free {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density_grad(&self, _x: &[f64], g: &mut [f64]) -> f64 {
            g.fill(0.0);
            0.0
        }
    }

    struct StdNormal(usize);
    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = -xi;
            }
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }
    }

    struct Nowhere;
    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            1
        }
        fn log_density_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
            g[0] = -x[0];
            if x[0] == 0.25 {
                -0.5 * x[0] * x[0]
            } else {
                f64::NEG_INFINITY
            }
        }
    }

    #[test]
    fn free_particle_drifts() {
        let mut z = PhasePoint::new(&Free(2), vec![1.0, -1.0], vec![0.5, 2.0]);
        assert!(leapfrog(&Free(2), &mut z, 0.1, &[1.0, 1.0]));
        assert_eq!(z.q, vec![1.0 + 0.1 * 0.5, -1.0 + 0.1 * 2.0]);
        assert_eq!(z.p, vec![0.5, 2.0]);
    }

    #[test]
    fn energy_is_conserved_on_gaussian() {
        let t = StdNormal(1);
        let mut z = PhasePoint::new(&t, vec![1.0], vec![0.5]);
        let h0 = z.hamiltonian(&[1.0]);
        for _ in 0..1000 {
            leapfrog(&t, &mut z, 0.1, &[1.0]);
        }
        assert!((z.hamiltonian(&[1.0]) - h0).abs() < 0.01);
    }

    #[test]
    fn leapfrog_is_reversible() {
        let t = StdNormal(3);
        let m = [1.0, 0.5, 2.0];
        let start = PhasePoint::new(&t, vec![0.3, -1.2, 2.0], vec![1.0, 0.1, -0.7]);
        let mut z = start.clone();
        for _ in 0..25 {
            leapfrog(&t, &mut z, 0.2, &m);
        }
        z.p.iter_mut().for_each(|p| *p = -*p);
        for _ in 0..25 {
            leapfrog(&t, &mut z, 0.2, &m);
        }
        for i in 0..3 {
            assert!((z.q[i] - start.q[i]).abs() < 1e-12);
            assert!((z.p[i] + start.p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_averaging_fixed_point_and_rejection() {
        let at_target = adapt_step_size(0.5, &[0.8; 200], 0.8);
        assert!(at_target.iter().all(|s| (s - at_target[0]).abs() < 1e-12));
        let rejecting = adapt_step_size(0.5, &[0.0; 200], 0.8);
        assert!(rejecting.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn divergence_at_first_step_keeps_position() {
        let start = PhasePoint::new(&Nowhere, vec![0.25], vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, stats) = nuts_transition(&Nowhere, &start, &[1.0], 0.1, 10, &mut rng);
        assert!(stats.divergent);
        assert_eq!(stats.n_leapfrog, 1);
        assert_eq!(next.q, start.q);
    }

    #[test]
    fn depth_zero_is_single_leapfrog() {
        let t = StdNormal(2);
        let start = PhasePoint::new(&t, vec![0.5, 0.5], vec![0.0, 0.0]);
        let mut r0 = ChaCha8Rng::seed_from_u64(4);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let (a, sa) = nuts_transition(&t, &start, &[1.0, 1.0], 0.3, 0, &mut r0);
        let (b, sb) = nuts_transition(&t, &start, &[1.0, 1.0], 0.3, 1, &mut r1);
        assert_eq!(sa.n_leapfrog, 1);
        assert_eq!(sa, sb);
        assert_eq!(a.q, b.q);
    }

    #[test]
    fn config_validation() {
        let t = StdNormal(1);
        let cfg = SamplerConfig {
            n_chains: 1,
            ..SamplerConfig::default()
        };
        assert!(run_chains(&t, &cfg, Execution::Sequential).is_err());
        let cfg = SamplerConfig {
            n_samples: 0,
            ..SamplerConfig::default()
        };
        assert!(run_chains(&t, &cfg, Execution::Sequential).is_err());
    }

    #[test]
    fn windows_cover_warmup() {
        let mut w = Windows::new(1000);
        let mut ends = Vec::new();
        for i in 0..1000 {
            if w.at_window_end() {
                ends.push(i);
                w.advance_window();
            }
            w.counter += 1;
        }
        assert_eq!(ends, vec![99, 149, 249, 449, 949]);
    }
}
