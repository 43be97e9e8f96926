//! Run configuration (TOML).
//!
//! ```toml
//! seed = 2024
//!
//! [paths]
//! controls = "controls.csv"
//! traces = "traces"        # or: series = "series"
//! output = "out"
//!
//! [segmentation]
//! length_per_sample = 0.4
//! ```
//!
//! Every other table is optional; see the field defaults below. Relative
//! paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Channel, ForceChannel};
use crate::design::DesignBounds;
use crate::diagnostics::PSRF_THRESHOLD;
use crate::io::DrawsFormat;
use crate::model::{Parameterization, PriorConfig};
use crate::predict::{GridSpec, DEFAULT_EXTRAPOLATION_MARGIN, DEFAULT_RESOLUTION};
use crate::sampler::SamplerConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override '{0}': expected key=value")]
    Override(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub controls: PathBuf,
    /// Directory of raw traces `<id>.csv` (header `sample,Ft,Ff,Fp`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traces: Option<PathBuf>,
    /// Directory of segmented series `<id>.csv` (header `L,Ft,Ff,Fp`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub bounds: DesignBounds,
    pub n_initial: usize,
    pub n_reserve: usize,
    pub skip: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            bounds: DesignBounds {
                v_min: 20.0,
                v_max: 60.0,
                f_min: 20.0,
                f_max: 50.0,
            },
            n_initial: 21,
            n_reserve: 0,
            skip: crate::design::DEFAULT_SKIP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Split penalty; the noise-scaled default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    pub min_seg_len: usize,
    /// Segments with mean force above this (N) count as tool contact.
    pub contact_threshold: f64,
    /// Cutting length (m) per in-contact sample; required with raw traces.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_per_sample: Option<f64>,
    /// Channel whose changepoints define the contact phases.
    pub detect_channel: ForceChannel,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            penalty: None,
            min_seg_len: 20,
            contact_threshold: 50.0,
            length_per_sample: None,
            detect_channel: ForceChannel::Ft,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub max_tree_depth: usize,
    pub target_accept: f64,
    pub init_radius: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            chains: d.n_chains,
            warmup: d.n_warmup,
            samples: d.n_samples,
            max_tree_depth: d.max_tree_depth,
            target_accept: d.target_accept,
            init_radius: d.init_radius,
        }
    }
}

impl SamplerSettings {
    pub fn with_seed(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_chains: self.chains,
            n_warmup: self.warmup,
            n_samples: self.samples,
            max_tree_depth: self.max_tree_depth,
            target_accept: self.target_accept,
            seed,
            init_radius: self.init_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub channels: Vec<Channel>,
    pub parameterization: Parameterization,
    pub psrf_threshold: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            channels: vec![
                Channel::Force(ForceChannel::Ft),
                Channel::Force(ForceChannel::Ff),
                Channel::Force(ForceChannel::Fp),
                Channel::Life,
            ],
            parameterization: Parameterization::default(),
            psrf_threshold: PSRF_THRESHOLD,
        }
    }
}

/// Prediction grid. Missing bounds fall back to the training box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_max: Option<f64>,
    pub nv: usize,
    pub nf: usize,
    /// Allowed reach beyond the training box, as a fraction of its extent.
    pub margin: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            v_min: None,
            v_max: None,
            f_min: None,
            f_max: None,
            nv: DEFAULT_RESOLUTION,
            nf: DEFAULT_RESOLUTION,
            margin: DEFAULT_EXTRAPOLATION_MARGIN,
        }
    }
}

impl GridSettings {
    pub fn resolve(&self, training: &[crate::data::ControlPoint]) -> GridSpec {
        let base = GridSpec::covering(training);
        GridSpec {
            v_min: self.v_min.unwrap_or(base.v_min),
            v_max: self.v_max.unwrap_or(base.v_max),
            nv: self.nv,
            f_min: self.f_min.unwrap_or(base.f_min),
            f_max: self.f_max.unwrap_or(base.f_max),
            nf: self.nf,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub draws_format: DrawsFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; there is deliberately no default.
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub grid: GridSettings,
    #[serde(default)]
    pub output: OutputSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parse a config file and resolve its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.controls);
        fix(&mut self.paths.output);
        if let Some(p) = self.paths.traces.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.series.as_mut() {
            fix(p);
        }
    }

    /// Set one dotted key, e.g. `sampler.chains=8` or `paths.output="run2"`.
    /// Values are read as TOML literals, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Override(assignment.to_string()));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| ConfigError::Invalid(format!("'{key}' does not name a table entry")))?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("'{key}' does not name a table entry")))?
            .insert(parts[parts.len() - 1].to_string(), value);
        *self = root.try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn force_channels(&self) -> Vec<ForceChannel> {
        self.model
            .channels
            .iter()
            .filter_map(|c| match c {
                Channel::Force(f) => Some(*f),
                Channel::Life => None,
            })
            .collect()
    }

    pub fn wants_life(&self) -> bool {
        self.model.channels.contains(&Channel::Life)
    }

    /// Checks settings and that every referenced input exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.paths.controls.is_file() {
            return bad(format!("controls file {} not found", self.paths.controls.display()));
        }
        match (&self.paths.traces, &self.paths.series) {
            (Some(_), Some(_)) => return bad("give either paths.traces or paths.series, not both".into()),
            (None, None) => return bad("one of paths.traces or paths.series is required".into()),
            (Some(t), None) => {
                if !t.is_dir() {
                    return bad(format!("traces directory {} not found", t.display()));
                }
                match self.segmentation.length_per_sample {
                    Some(l) if l.is_finite() && l > 0.0 => {}
                    _ => return bad("segmentation.length_per_sample must be positive when reading raw traces".into()),
                }
            }
            (None, Some(s)) => {
                if !s.is_dir() {
                    return bad(format!("series directory {} not found", s.display()));
                }
            }
        }
        if let Some(p) = self.segmentation.penalty {
            if !(p.is_finite() && p >= 0.0) {
                return bad(format!("segmentation.penalty must be non-negative, got {p}"));
            }
        }
        if self.segmentation.min_seg_len < 2 {
            return bad("segmentation.min_seg_len must be at least 2".into());
        }
        if !self.segmentation.contact_threshold.is_finite() {
            return bad("segmentation.contact_threshold must be finite".into());
        }
        self.design.bounds.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.priors.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sampler
            .with_seed(self.seed)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.channels.is_empty() {
            return bad("model.channels must not be empty".into());
        }
        if !(self.model.psrf_threshold.is_finite() && self.model.psrf_threshold > 1.0) {
            return bad("model.psrf_threshold must exceed 1".into());
        }
        if self.grid.nv < 2 || self.grid.nf < 2 {
            return bad("grid.nv and grid.nf must be at least 2".into());
        }
        if !(self.grid.margin.is_finite() && self.grid.margin >= 0.0) {
            return bad("grid.margin must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 7\n[paths]\ncontrols = \"c.csv\"\nseries = \"s\"\noutput = \"out\"\n";

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.sampler.chains, 4);
        assert_eq!(cfg.sampler.warmup, 1000);
        assert_eq!(cfg.grid.nv * cfg.grid.nf, 400);
        assert_eq!(cfg.model.psrf_threshold, 1.05);
        assert_eq!(cfg.priors, PriorConfig::default());
        assert_eq!(cfg.force_channels().len(), 3);
        assert!(cfg.wants_life());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn seed_is_required() {
        let text = MINIMAL.replace("seed = 7\n", "");
        assert!(matches!(RunConfig::from_toml(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}[sampler]\nchain = 3\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.apply_override("sampler.chains=8").unwrap();
        cfg.apply_override("priors.eta_sq_scale = 2.5").unwrap();
        cfg.apply_override("model.channels=[\"Ft\",\"life\"]").unwrap();
        cfg.apply_override("paths.output=run2").unwrap();
        cfg.apply_override("segmentation.length_per_sample=0.25").unwrap();
        cfg.apply_override("model.parameterization=non-centered").unwrap();
        assert_eq!(cfg.sampler.chains, 8);
        assert_eq!(cfg.priors.eta_sq_scale, 2.5);
        assert_eq!(cfg.model.channels, vec![Channel::Force(ForceChannel::Ft), Channel::Life]);
        assert_eq!(cfg.paths.output, PathBuf::from("run2"));
        assert_eq!(cfg.segmentation.length_per_sample, Some(0.25));
        assert_eq!(cfg.model.parameterization, Parameterization::NonCentered);
        assert!(cfg.apply_override("sampler.chains=many").is_err());
        assert!(cfg.apply_override("nonsense").is_err());
        assert!(cfg.apply_override("sampler.bogus=1").is_err());
    }

    #[test]
    fn validation_fails_fast_on_missing_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.csv"), "id,v_c,f\n").unwrap();
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.resolve_paths(dir.path());
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("series directory"), "{err}");
        std::fs::create_dir(dir.path().join("s")).unwrap();
        cfg.validate().unwrap();
        cfg.seed = 0;
        cfg.sampler.chains = 1;
        assert!(cfg.validate().is_err());
    }
}
