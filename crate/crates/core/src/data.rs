//! Experiment records shared by the segmentation, model and prediction stages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A (cutting speed m/min, feed rate μm/rev) setting. After standardization the
/// same type holds z-scores, so only finiteness is required here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub v_c: f64,
    pub f: f64,
}

impl ControlPoint {
    pub const fn new(v_c: f64, f: f64) -> Self {
        Self { v_c, f }
    }

    pub fn is_finite(&self) -> bool {
        self.v_c.is_finite() && self.f.is_finite()
    }
}

/// The three dynamometer force components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ForceChannel {
    /// Tangential (cutting) force.
    Ft,
    /// Feed force.
    Ff,
    /// Passive (radial) force.
    Fp,
}

impl ForceChannel {
    pub const ALL: [ForceChannel; 3] = [ForceChannel::Ft, ForceChannel::Ff, ForceChannel::Fp];

    pub fn name(self) -> &'static str {
        match self {
            ForceChannel::Ft => "Ft",
            ForceChannel::Ff => "Ff",
            ForceChannel::Fp => "Fp",
        }
    }
}

impl fmt::Display for ForceChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Anything a model can be fitted to: one force channel or tool life.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Channel {
    Force(ForceChannel),
    Life,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Force(c) => c.name(),
            Channel::Life => "life",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unknown channel '{0}' (expected Ft, Ff, Fp or life)")]
pub struct UnknownChannel(pub String);

impl FromStr for ForceChannel {
    type Err = UnknownChannel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ft" => Ok(ForceChannel::Ft),
            "ff" => Ok(ForceChannel::Ff),
            "fp" => Ok(ForceChannel::Fp),
            _ => Err(UnknownChannel(s.to_string())),
        }
    }
}

impl FromStr for Channel {
    type Err = UnknownChannel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("life") {
            return Ok(Channel::Life);
        }
        s.parse().map(Channel::Force)
    }
}

impl From<Channel> for String {
    fn from(c: Channel) -> String {
        c.name().to_string()
    }
}

impl TryFrom<String> for Channel {
    type Error = UnknownChannel;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Concatenated in-contact measurements of one experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSeries {
    /// Cumulative cutting length (m), strictly increasing.
    pub length: Vec<f64>,
    pub ft: Vec<f64>,
    pub ff: Vec<f64>,
    pub fp: Vec<f64>,
}

impl ExperimentSeries {
    pub fn len(&self) -> usize {
        self.length.len()
    }

    pub fn is_empty(&self) -> bool {
        self.length.is_empty()
    }

    pub fn force(&self, channel: ForceChannel) -> &[f64] {
        match channel {
            ForceChannel::Ft => &self.ft,
            ForceChannel::Ff => &self.ff,
            ForceChannel::Fp => &self.fp,
        }
    }

    /// Checks that the record can enter the regression: at least two points,
    /// strictly increasing length, finite values. Returns the first offending
    /// row index on failure.
    pub fn validate(&self) -> Result<(), SeriesError> {
        let n = self.length.len();
        if self.ft.len() != n || self.ff.len() != n || self.fp.len() != n {
            return Err(SeriesError::RaggedColumns);
        }
        if n < 2 {
            return Err(SeriesError::TooShort(n));
        }
        for i in 0..n {
            let row = [self.length[i], self.ft[i], self.ff[i], self.fp[i]];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(SeriesError::NonFinite { row: i });
            }
            if i > 0 && self.length[i] <= self.length[i - 1] {
                return Err(SeriesError::NonMonotoneLength { row: i });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("series columns have different lengths")]
    RaggedColumns,
    #[error("series needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("cutting length is not strictly increasing at row {row}")]
    NonMonotoneLength { row: usize },
}

/// One turning test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: u32,
    pub control: ControlPoint,
    pub series: ExperimentSeries,
    /// Cutting length at tool failure (m), when known.
    pub tool_life: Option<f64>,
}
