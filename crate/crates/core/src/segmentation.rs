//! Contact-phase extraction from raw dynamometer traces.
//!
//! Binary segmentation under a change-in-mean model: a segment is split at the
//! index that maximizes the reduction in within-segment squared error (the
//! CUSUM statistic), and the split is kept only when that reduction beats the
//! penalty. Segments whose mean force exceeds a contact threshold are then
//! concatenated into a (cutting length, force) series.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ExperimentSeries, ForceChannel};

pub const DEFAULT_MIN_SEG_LEN: usize = 20;

/// Splits whose gain is below this fraction of the parent cost are rounding
/// noise, whatever the penalty.
const RELATIVE_GAIN_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("trace of {len} samples is too short for minimum segment length {min_seg_len}")]
    InsufficientData { len: usize, min_seg_len: usize },
    #[error("minimum segment length must be at least 2, got {0}")]
    MinSegmentTooSmall(usize),
    #[error("penalty must be finite and non-negative, got {0}")]
    InvalidPenalty(f64),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("no segment has mean force above the contact threshold {0} N")]
    EmptyContact(f64),
    #[error("segmentation covers {seg} samples but the trace has {trace}")]
    Mismatch { seg: usize, trace: usize },
}

/// Low-pass filtered force samples for one experiment, including air cuts.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrace {
    pub sample: Vec<u64>,
    pub ft: Vec<f64>,
    pub ff: Vec<f64>,
    pub fp: Vec<f64>,
    /// Cutting length (m) credited to each in-contact sample.
    pub length_per_sample: f64,
}

impl RawTrace {
    pub fn new(
        sample: Vec<u64>,
        ft: Vec<f64>,
        ff: Vec<f64>,
        fp: Vec<f64>,
        length_per_sample: f64,
    ) -> Result<Self, SegmentationError> {
        let n = sample.len();
        if ft.len() != n || ff.len() != n || fp.len() != n {
            return Err(SegmentationError::InvalidTrace("channels have different lengths".into()));
        }
        if n < 2 {
            return Err(SegmentationError::InvalidTrace(format!("need at least 2 samples, got {n}")));
        }
        if let Some(i) = (0..n).find(|&i| !(ft[i].is_finite() && ff[i].is_finite() && fp[i].is_finite())) {
            return Err(SegmentationError::InvalidTrace(format!("non-finite force at sample {i}")));
        }
        if !(length_per_sample.is_finite() && length_per_sample > 0.0) {
            return Err(SegmentationError::InvalidTrace(format!(
                "length per sample must be positive, got {length_per_sample}"
            )));
        }
        Ok(Self {
            sample,
            ft,
            ff,
            fp,
            length_per_sample,
        })
    }

    pub fn len(&self) -> usize {
        self.sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }

    pub fn channel(&self, channel: ForceChannel) -> &[f64] {
        match channel {
            ForceChannel::Ft => &self.ft,
            ForceChannel::Ff => &self.ff,
            ForceChannel::Fp => &self.fp,
        }
    }
}

/// Changepoints of one signal with per-segment moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Sorted, each in `(0, len)`. Segment `k` is `[cp[k-1], cp[k])`.
    pub changepoints: Vec<usize>,
    pub segment_means: Vec<f64>,
    /// Population variance of each segment.
    pub segment_vars: Vec<f64>,
    pub len: usize,
}

impl Segmentation {
    /// Half-open sample ranges of the segments in time order.
    pub fn bounds(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.changepoints.len() + 2);
        edges.push(0);
        edges.extend_from_slice(&self.changepoints);
        edges.push(self.len);
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Total within-segment sum of squared errors.
    pub fn total_cost(&self) -> f64 {
        self.bounds()
            .iter()
            .zip(&self.segment_vars)
            .map(|(&(a, b), v)| v * (b - a) as f64)
            .sum()
    }
}

/// Prefix sums of a signal shifted by its first sample, so a constant run gives
/// exactly zero cost.
struct Prefix {
    s1: Vec<f64>,
    s2: Vec<f64>,
    shift: f64,
}

impl Prefix {
    fn new(x: &[f64]) -> Self {
        let shift = x[0];
        let mut s1 = Vec::with_capacity(x.len() + 1);
        let mut s2 = Vec::with_capacity(x.len() + 1);
        s1.push(0.0);
        s2.push(0.0);
        for &v in x {
            let d = v - shift;
            s1.push(s1.last().unwrap() + d);
            s2.push(s2.last().unwrap() + d * d);
        }
        Self { s1, s2, shift }
    }

    /// Sum of squared deviations from the mean on `[a, b)`.
    fn cost(&self, a: usize, b: usize) -> f64 {
        let n = (b - a) as f64;
        let s = self.s1[b] - self.s1[a];
        let q = self.s2[b] - self.s2[a];
        (q - s * s / n).max(0.0)
    }

    fn mean(&self, a: usize, b: usize) -> f64 {
        self.shift + (self.s1[b] - self.s1[a]) / (b - a) as f64
    }
}

/// Robust noise scale from the median absolute deviation of first differences.
pub fn noise_sd(signal: &[f64]) -> f64 {
    if signal.len() < 2 {
        return 0.0;
    }
    let mut d: Vec<f64> = signal.windows(2).map(|w| w[1] - w[0]).collect();
    let med = median_in_place(&mut d);
    let mut dev: Vec<f64> = d.iter().map(|x| (x - med).abs()).collect();
    let mad = median_in_place(&mut dev);
    1.4826 * mad / std::f64::consts::SQRT_2
}

fn median_in_place(x: &mut [f64]) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

/// Threshold constant on the CUSUM scale; the gain penalty is its square.
pub const PENALTY_CONSTANT: f64 = 1.3;

/// Default penalty `C² · 2 σ̂² ln n` with `C = PENALTY_CONSTANT`.
///
/// With `C = 1` this is the BIC-like `2 σ̂² ln n`, which admits spurious
/// splits in a few percent of pure-noise segments under recursive search.
pub fn default_penalty(signal: &[f64]) -> f64 {
    let s = noise_sd(signal);
    PENALTY_CONSTANT * PENALTY_CONSTANT * 2.0 * s * s * (signal.len().max(2) as f64).ln()
}

/// Binary segmentation of `signal` for changes in mean.
pub fn binary_segmentation(
    signal: &[f64],
    penalty: f64,
    min_seg_len: usize,
) -> Result<Segmentation, SegmentationError> {
    if min_seg_len < 2 {
        return Err(SegmentationError::MinSegmentTooSmall(min_seg_len));
    }
    if !(penalty.is_finite() && penalty >= 0.0) {
        return Err(SegmentationError::InvalidPenalty(penalty));
    }
    let n = signal.len();
    if n < 2 * min_seg_len {
        return Err(SegmentationError::InsufficientData { len: n, min_seg_len });
    }
    if signal.iter().any(|x| !x.is_finite()) {
        return Err(SegmentationError::InvalidTrace("non-finite sample in signal".into()));
    }

    let prefix = Prefix::new(signal);
    let mut changepoints = Vec::new();
    let mut stack = vec![(0usize, n)];
    while let Some((a, b)) = stack.pop() {
        if b - a < 2 * min_seg_len {
            continue;
        }
        let parent = prefix.cost(a, b);
        let (tau, gain) = (a + min_seg_len..=b - min_seg_len)
            .map(|t| (t, parent - prefix.cost(a, t) - prefix.cost(t, b)))
            .fold((a, f64::NEG_INFINITY), |best, cand| if cand.1 > best.1 { cand } else { best });
        if gain > penalty && gain > RELATIVE_GAIN_FLOOR * parent {
            changepoints.push(tau);
            stack.push((tau, b));
            stack.push((a, tau));
        }
    }
    changepoints.sort_unstable();

    let mut seg = Segmentation {
        changepoints,
        segment_means: Vec::new(),
        segment_vars: Vec::new(),
        len: n,
    };
    let bounds = seg.bounds();
    seg.segment_means = bounds.iter().map(|&(a, b)| prefix.mean(a, b)).collect();
    seg.segment_vars = bounds.iter().map(|&(a, b)| prefix.cost(a, b) / (b - a) as f64).collect();
    Ok(seg)
}

/// Segment one channel of a trace. `penalty = None` selects [`default_penalty`].
pub fn segment_trace(
    trace: &RawTrace,
    channel: ForceChannel,
    penalty: Option<f64>,
    min_seg_len: usize,
) -> Result<Segmentation, SegmentationError> {
    let signal = trace.channel(channel);
    let penalty = penalty.unwrap_or_else(|| default_penalty(signal));
    binary_segmentation(signal, penalty, min_seg_len)
}

/// Keep segments with mean above `contact_threshold` and concatenate them,
/// crediting `length_per_sample` of cutting length to every retained sample.
pub fn extract_contact_phases(
    trace: &RawTrace,
    seg: &Segmentation,
    contact_threshold: f64,
) -> Result<ExperimentSeries, SegmentationError> {
    if seg.len != trace.len() {
        return Err(SegmentationError::Mismatch {
            seg: seg.len,
            trace: trace.len(),
        });
    }
    let mut out = ExperimentSeries::default();
    for (&(a, b), &mean) in seg.bounds().iter().zip(&seg.segment_means) {
        if mean <= contact_threshold {
            continue;
        }
        out.ft.extend_from_slice(&trace.ft[a..b]);
        out.ff.extend_from_slice(&trace.ff[a..b]);
        out.fp.extend_from_slice(&trace.fp[a..b]);
    }
    if out.ft.is_empty() {
        return Err(SegmentationError::EmptyContact(contact_threshold));
    }
    out.length = (1..=out.ft.len()).map(|k| k as f64 * trace.length_per_sample).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn steps(levels: &[(f64, usize)]) -> Vec<f64> {
        levels.iter().flat_map(|&(v, n)| std::iter::repeat_n(v, n)).collect()
    }

    fn trace_from(ft: Vec<f64>) -> RawTrace {
        let n = ft.len();
        let ff: Vec<f64> = ft.iter().map(|x| 0.5 * x).collect();
        let fp: Vec<f64> = ft.iter().map(|x| 0.25 * x).collect();
        RawTrace::new((0..n as u64).collect(), ft, ff, fp, 0.01).unwrap()
    }

    /// Exhaustive least-squares placement of exactly two changepoints.
    fn two_cp_oracle(x: &[f64], min_len: usize) -> (usize, usize) {
        let p = Prefix::new(x);
        let n = x.len();
        let mut best = (f64::INFINITY, 0, 0);
        for i in min_len..=n - 2 * min_len {
            for j in i + min_len..=n - min_len {
                let c = p.cost(0, i) + p.cost(i, j) + p.cost(j, n);
                if c < best.0 {
                    best = (c, i, j);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn single_noiseless_step() {
        let x = steps(&[(0.0, 50), (10.0, 50)]);
        let seg = binary_segmentation(&x, 1.0, 20).unwrap();
        assert_eq!(seg.changepoints, vec![50]);
        assert_eq!(seg.segment_means, vec![0.0, 10.0]);
        assert_eq!(seg.segment_vars, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_has_no_changepoints() {
        for level in [0.0, 0.1, 123.456] {
            let x = vec![level; 300];
            for penalty in [1e-300, 1e-6, 1.0, 100.0] {
                let seg = binary_segmentation(&x, penalty, 20).unwrap();
                assert!(seg.changepoints.is_empty());
            }
        }
    }

    #[test]
    fn three_level_noisy_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut x = steps(&[(1.0, 100), (3.0, 150), (2.0, 100)]);
        for v in &mut x {
            *v += noise.sample(&mut rng);
        }
        let oracle = two_cp_oracle(&x, 20);
        assert!(oracle.0.abs_diff(100) <= 3 && oracle.1.abs_diff(250) <= 3);
        let seg = binary_segmentation(&x, default_penalty(&x), 20).unwrap();
        assert_eq!(seg.changepoints.len(), 2);
        assert!(seg.changepoints[0].abs_diff(100) <= 3);
        assert!(seg.changepoints[1].abs_diff(250) <= 3);
        assert!(seg.changepoints[0].abs_diff(oracle.0) <= 3);
        assert!(seg.changepoints[1].abs_diff(oracle.1) <= 3);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            binary_segmentation(&[1.0; 30], 1.0, 20),
            Err(SegmentationError::InsufficientData { len: 30, .. })
        ));
        assert!(matches!(
            binary_segmentation(&[1.0; 30], 1.0, 1),
            Err(SegmentationError::MinSegmentTooSmall(1))
        ));
        assert!(matches!(
            binary_segmentation(&[1.0; 60], -1.0, 20),
            Err(SegmentationError::InvalidPenalty(_))
        ));
        let mut x = vec![1.0; 60];
        x[7] = f64::NAN;
        assert!(binary_segmentation(&x, 1.0, 20).is_err());
    }

    #[test]
    fn segments_respect_min_length() {
        // a 10-sample blip cannot be isolated with min_seg_len = 20
        let x = steps(&[(0.0, 60), (5.0, 10), (0.0, 60)]);
        let seg = binary_segmentation(&x, 0.5, 20).unwrap();
        for (a, b) in seg.bounds() {
            assert!(b - a >= 20);
        }
    }

    #[test]
    fn contact_phases_drop_gaps() {
        let ft = steps(&[(200.0, 60), (0.0, 40), (210.0, 50)]);
        let trace = trace_from(ft);
        let seg = segment_trace(&trace, ForceChannel::Ft, None, 20).unwrap();
        assert_eq!(seg.changepoints, vec![60, 100]);
        let series = extract_contact_phases(&trace, &seg, 50.0).unwrap();

        let expected_ft: Vec<f64> = trace.ft[..60].iter().chain(&trace.ft[100..]).copied().collect();
        let expected_ff: Vec<f64> = trace.ff[..60].iter().chain(&trace.ff[100..]).copied().collect();
        assert_eq!(series.ft, expected_ft);
        assert_eq!(series.ff, expected_ff);
        assert_eq!(series.len(), 110);
        assert!((series.length.last().unwrap() - 110.0 * 0.01).abs() < 1e-12);
        series.validate().unwrap();
    }

    #[test]
    fn all_contact_is_identity_length() {
        let trace = trace_from(steps(&[(150.0, 40), (180.0, 40)]));
        let seg = segment_trace(&trace, ForceChannel::Ft, None, 20).unwrap();
        let series = extract_contact_phases(&trace, &seg, 50.0).unwrap();
        assert_eq!(series.len(), trace.len());
        assert_eq!(series.ft, trace.ft);
    }

    #[test]
    fn threshold_above_max_is_empty_contact() {
        let trace = trace_from(steps(&[(150.0, 40), (0.0, 40)]));
        let seg = segment_trace(&trace, ForceChannel::Ft, None, 20).unwrap();
        assert_eq!(
            extract_contact_phases(&trace, &seg, 1e6),
            Err(SegmentationError::EmptyContact(1e6))
        );
    }

    #[test]
    fn mismatched_segmentation_rejected() {
        let trace = trace_from(vec![100.0; 50]);
        let seg = binary_segmentation(&[100.0; 60], 1.0, 20).unwrap();
        assert!(matches!(
            extract_contact_phases(&trace, &seg, 1.0),
            Err(SegmentationError::Mismatch { .. })
        ));
    }

    #[test]
    fn penalty_stability_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut x = steps(&[(0.0, 80), (10.0, 80), (4.0, 80)]);
        for v in &mut x {
            *v += noise.sample(&mut rng);
        }
        let base = default_penalty(&x);
        let reference = binary_segmentation(&x, base, 20).unwrap().changepoints;
        for factor in [0.5, 0.75, 2.0, 4.0, 16.0] {
            let cps = binary_segmentation(&x, base * factor, 20).unwrap().changepoints;
            assert_eq!(cps, reference, "factor {factor}");
        }
    }

    #[test]
    fn noise_scale_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 2.0).unwrap();
        let x: Vec<f64> = (0..20_000).map(|_| noise.sample(&mut rng)).collect();
        assert!((noise_sd(&x) - 2.0).abs() < 0.1);
    }
}
