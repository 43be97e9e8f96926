//! End-to-end run: load → segment → fit per channel → diagnose → predict.
//!
//! Outputs land in `paths.output`, next to a `manifest.json` holding the
//! config echo, the seed, SHA-256 digests of every input and output, and the
//! status of each stage. Chain seeds are `seed + k` for the k-th entry of
//! `model.channels`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::{Channel, ControlPoint, ExperimentRecord, ForceChannel};
use crate::diagnostics::{summarize_with, FitSummary};
use crate::exec::Execution;
use crate::io::{self, ControlRow};
use crate::model::HierarchicalModel;
use crate::predict::{fit_taylor, fit_tool_life, PosteriorGp};
use crate::sampler::{run_chains, ChainSet};
use crate::segmentation::{extract_contact_phases, segment_trace, Segmentation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    /// Bad input or configuration.
    Validation,
    /// Numerical or I/O failure.
    Internal,
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    fn new(stage: &str, kind: ErrorKind, err: impl std::fmt::Display) -> Self {
        Self {
            stage: stage.to_string(),
            kind,
            message: err.to_string(),
        }
    }
}

fn io_kind(e: &io::IoError) -> ErrorKind {
    if e.is_user_error() {
        ErrorKind::Validation
    } else {
        ErrorKind::Internal
    }
}

/// Experiments with provenance.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub experiments: Vec<ExperimentRecord>,
    /// Input path → SHA-256.
    pub provenance: BTreeMap<String, String>,
}

impl Dataset {
    pub fn controls(&self) -> Vec<ControlPoint> {
        self.experiments.iter().map(|r| r.control).collect()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.experiments.iter().map(|r| r.id).collect()
    }
}

fn digest_into(map: &mut BTreeMap<String, String>, path: &Path) -> Result<(), io::IoError> {
    map.insert(path.display().to_string(), io::file_digest(path)?);
    Ok(())
}

/// Controls plus one pre-segmented series file `<dir>/<id>.csv` per row.
pub fn load_dataset(controls: &Path, series_dir: &Path) -> Result<Dataset, io::IoError> {
    let rows = io::load_controls(controls)?;
    let mut provenance = BTreeMap::new();
    digest_into(&mut provenance, controls)?;
    let mut experiments = Vec::with_capacity(rows.len());
    for row in rows {
        let path = series_dir.join(format!("{}.csv", row.id));
        let series = io::load_series(&path)?;
        digest_into(&mut provenance, &path)?;
        experiments.push(ExperimentRecord {
            id: row.id,
            control: row.control,
            series,
            tool_life: row.tool_life,
        });
    }
    Ok(Dataset { experiments, provenance })
}

/// Per-stage status in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// `ok`, `skipped` or `failed`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStatus {
    pub max_psrf: Option<f64>,
    pub unconverged: Vec<String>,
    pub divergences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    /// Paths relative to the output directory.
    pub outputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub convergence: BTreeMap<String, ChannelStatus>,
    /// False when a stage failed and outputs are partial.
    pub complete: bool,
}

#[derive(Clone, Debug)]
pub struct ChannelFit {
    pub channel: Channel,
    pub chains: ChainSet,
    pub summary: FitSummary,
    pub surface: crate::predict::SurfaceGrid,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub fits: Vec<ChannelFit>,
}

impl RunOutcome {
    /// True when every fitted channel has all PSRF below the threshold.
    pub fn converged(&self) -> bool {
        self.manifest.convergence.values().all(|c| c.unconverged.is_empty())
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run<'_> {
    fn ok(&mut self, stage: &str) {
        self.record(stage, "ok", None);
    }

    fn record(&mut self, stage: &str, status: &str, message: Option<String>) {
        self.manifest.stages.push(StageRecord {
            stage: stage.to_string(),
            status: status.to_string(),
            message,
        });
    }

    fn output(&mut self, stage: &str, rel: &str, write: impl FnOnce(&Path) -> Result<(), io::IoError>) -> Result<(), PipelineError> {
        let path = self.out.join(rel);
        write(&path).map_err(|e| PipelineError::new(stage, io_kind(&e), e))?;
        let digest = io::file_digest(&path).map_err(|e| PipelineError::new(stage, ErrorKind::Internal, e))?;
        self.manifest.outputs.insert(rel.to_string(), digest);
        Ok(())
    }

    fn write_manifest(&self) -> Result<PathBuf, PipelineError> {
        let path = self.out.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        io::write_text(&path, &text).map_err(|e| PipelineError::new("manifest", ErrorKind::Internal, e))?;
        Ok(path)
    }

    /// Flag a failed stage in a partial manifest and return the error.
    fn fail(&mut self, err: PipelineError) -> PipelineError {
        self.record(&err.stage.clone(), "failed", Some(err.message.clone()));
        self.manifest.complete = false;
        if let Err(e) = self.write_manifest() {
            log::error!("could not write partial manifest: {e}");
        }
        err
    }
}

fn segment_all(run: &mut Run, rows: &[ControlRow], traces: &Path) -> Result<Vec<ExperimentRecord>, PipelineError> {
    let seg_cfg = &run.cfg.segmentation;
    let lps = seg_cfg.length_per_sample.expect("validated");
    let mut records = Vec::with_capacity(rows.len());
    let mut segs: Vec<(u32, Segmentation)> = Vec::with_capacity(rows.len());
    for row in rows {
        let path = traces.join(format!("{}.csv", row.id));
        let trace = io::load_trace(&path, lps).map_err(|e| PipelineError::new("segment", io_kind(&e), e))?;
        digest_into(&mut run.manifest.inputs, &path).map_err(|e| PipelineError::new("segment", ErrorKind::Internal, e))?;
        let seg = segment_trace(&trace, seg_cfg.detect_channel, seg_cfg.penalty, seg_cfg.min_seg_len)
            .map_err(|e| PipelineError::new("segment", ErrorKind::Validation, format!("experiment {}: {e}", row.id)))?;
        let series = extract_contact_phases(&trace, &seg, seg_cfg.contact_threshold)
            .map_err(|e| PipelineError::new("segment", ErrorKind::Validation, format!("experiment {}: {e}", row.id)))?;
        run.output("segment", &format!("series/{}.csv", row.id), |p| io::write_series(p, &series))?;
        records.push(ExperimentRecord {
            id: row.id,
            control: row.control,
            series,
            tool_life: row.tool_life,
        });
        segs.push((row.id, seg));
    }
    let threshold = seg_cfg.contact_threshold;
    let table: Vec<(u32, &Segmentation, f64)> = segs.iter().map(|(id, s)| (*id, s, threshold)).collect();
    run.output("segment", "changepoints.csv", |p| io::write_changepoints_csv(p, &table))?;
    Ok(records)
}

fn load(run: &mut Run) -> Result<Vec<ExperimentRecord>, PipelineError> {
    let cfg = run.cfg;
    let controls = &cfg.paths.controls;
    let records = if let Some(series_dir) = &cfg.paths.series {
        let ds = load_dataset(controls, series_dir).map_err(|e| PipelineError::new("load", io_kind(&e), e))?;
        run.manifest.inputs.extend(ds.provenance);
        run.ok("load");
        ds.experiments
    } else {
        let rows = io::load_controls(controls).map_err(|e| PipelineError::new("load", io_kind(&e), e))?;
        digest_into(&mut run.manifest.inputs, controls).map_err(|e| PipelineError::new("load", ErrorKind::Internal, e))?;
        run.ok("load");
        let traces = cfg.paths.traces.clone().expect("validated");
        let records = segment_all(run, &rows, &traces)?;
        run.ok("segment");
        records
    };
    if records.is_empty() {
        return Err(PipelineError::new("load", ErrorKind::Validation, "the controls table lists no experiments"));
    }
    Ok(records)
}

fn finish_channel(
    run: &mut Run,
    channel: Channel,
    chains: ChainSet,
    posterior: &PosteriorGp,
    exec: Execution,
) -> Result<ChannelFit, PipelineError> {
    let name = channel.name();
    let cfg = run.cfg;
    let ext = cfg.output.draws_format.extension();
    let fit_stage = format!("fit:{name}");
    run.output(&fit_stage, &format!("draws_{name}.{ext}"), |p| io::write_draws(p, &chains, cfg.output.draws_format))?;
    run.ok(&fit_stage);

    let diag_stage = format!("diagnose:{name}");
    let summary = summarize_with(&chains, exec).map_err(|e| PipelineError::new(&diag_stage, ErrorKind::Internal, e))?;
    let threshold = cfg.model.psrf_threshold;
    let report = io::format_report(&format!("channel {name}"), &summary, &chains, threshold);
    run.output(&diag_stage, &format!("summary_{name}.csv"), |p| io::write_summary_csv(p, &summary))?;
    run.output(&diag_stage, &format!("report_{name}.txt"), |p| io::write_text(p, &report))?;
    let unconverged: Vec<String> = summary.unconverged(threshold).iter().map(|p| p.name.clone()).collect();
    if !unconverged.is_empty() {
        log::warn!("channel {name}: PSRF above {threshold} for {}", unconverged.join(", "));
    }
    run.manifest.convergence.insert(
        name.to_string(),
        ChannelStatus {
            max_psrf: summary.max_psrf(),
            unconverged,
            divergences: chains.total_divergences(),
        },
    );
    run.ok(&diag_stage);

    let pred_stage = format!("predict:{name}");
    let grid = cfg.grid.resolve(posterior.training_controls());
    let surface = posterior
        .surface(&grid, channel, cfg.grid.margin, exec)
        .map_err(|e| PipelineError::new(&pred_stage, ErrorKind::Validation, e))?;
    run.output(&pred_stage, &format!("surface_{name}.csv"), |p| io::write_surface_csv(p, &surface))?;
    run.output(&pred_stage, &format!("surface_{name}.dat"), |p| io::write_surface_matrix(p, &surface))?;
    run.ok(&pred_stage);
    Ok(ChannelFit {
        channel,
        chains,
        summary,
        surface,
    })
}

fn fit_force(run: &mut Run, records: &[ExperimentRecord], channel: ForceChannel, seed: u64, exec: Execution) -> Result<ChannelFit, PipelineError> {
    let stage = format!("fit:{}", channel.name());
    let cfg = run.cfg;
    let model = HierarchicalModel::new(records, channel, cfg.priors, cfg.model.parameterization)
        .map_err(|e| PipelineError::new(&stage, ErrorKind::Validation, e))?;
    let chains = run_chains(&model, &cfg.sampler.with_seed(seed), exec).map_err(|e| PipelineError::new(&stage, ErrorKind::Internal, e))?;
    let ids: Vec<u32> = records.iter().map(|r| r.id).collect();
    let controls: Vec<ControlPoint> = records.iter().map(|r| r.control).collect();
    let posterior = PosteriorGp::from_slopes(&chains, &ids, &controls, exec)
        .map_err(|e| PipelineError::new(&format!("predict:{}", channel.name()), ErrorKind::Internal, e))?;
    finish_channel(run, Channel::Force(channel), chains, &posterior, exec)
}

fn fit_life(run: &mut Run, records: &[ExperimentRecord], seed: u64, exec: Execution) -> Result<Option<ChannelFit>, PipelineError> {
    let lives: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.tool_life.map(|t| (r.control.v_c, t)))
        .collect();
    if lives.len() < 3 {
        run.record("fit:life", "skipped", Some(format!("{} tool-life observations, need 3", lives.len())));
        return Ok(None);
    }
    match fit_taylor(&lives) {
        Ok(t) => {
            let text = serde_json::to_string_pretty(&t).expect("taylor serializes") + "\n";
            run.output("taylor", "taylor.json", |p| io::write_text(p, &text))?;
            run.ok("taylor");
        }
        Err(e) => run.record("taylor", "skipped", Some(e.to_string())),
    }
    let cfg = run.cfg;
    let grid = {
        let controls: Vec<ControlPoint> = records.iter().filter(|r| r.tool_life.is_some()).map(|r| r.control).collect();
        cfg.grid.resolve(&controls)
    };
    let fit = fit_tool_life(records, &cfg.priors, &cfg.sampler.with_seed(seed), Some(&grid), exec)
        .map_err(|e| PipelineError::new("fit:life", ErrorKind::Internal, e))?;
    finish_channel(run, Channel::Life, fit.chains, &fit.posterior, exec).map(Some)
}

/// Execute the configured run. On a stage failure the manifest is still
/// written, marked incomplete, and the stage-tagged error is returned.
pub fn run_pipeline(cfg: &RunConfig, exec: Execution) -> Result<RunOutcome, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::new("config", ErrorKind::Validation, e))?;
    let mut run = Run {
        cfg,
        out: cfg.paths.output.clone(),
        manifest: Manifest {
            tool: "toolwear".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stages: Vec::new(),
            convergence: BTreeMap::new(),
            complete: true,
        },
    };
    let records = match load(&mut run) {
        Ok(r) => r,
        Err(e) => return Err(run.fail(e)),
    };
    let mut fits = Vec::new();
    for (k, channel) in cfg.model.channels.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(k as u64);
        let result = match channel {
            Channel::Force(f) => fit_force(&mut run, &records, *f, seed, exec).map(Some),
            Channel::Life => fit_life(&mut run, &records, seed, exec),
        };
        match result {
            Ok(Some(fit)) => fits.push(fit),
            Ok(None) => {}
            Err(e) => return Err(run.fail(e)),
        }
    }
    let manifest_path = run.write_manifest()?;
    Ok(RunOutcome {
        manifest: run.manifest,
        manifest_path,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate, SimulationConfig};

    fn bundle(dir: &Path, n: usize) -> RunConfig {
        let sim = simulate(&SimulationConfig {
            n_experiments: n,
            ..SimulationConfig::default()
        })
        .unwrap();
        let rows: Vec<ControlRow> = sim
            .records
            .iter()
            .map(|r| ControlRow {
                id: r.id,
                control: r.control,
                tool_life: r.tool_life,
            })
            .collect();
        io::write_controls(&dir.join("controls.csv"), &rows).unwrap();
        for (r, t) in sim.records.iter().zip(&sim.traces) {
            io::write_trace(&dir.join(format!("traces/{}.csv", r.id)), t).unwrap();
        }
        let text = format!(
            "seed = 3\n[paths]\ncontrols = \"controls.csv\"\ntraces = \"traces\"\noutput = \"out\"\n\
             [segmentation]\nlength_per_sample = {}\n[sampler]\nwarmup = 150\nsamples = 100\nchains = 2\n\
             [model]\nchannels = [\"Ft\", \"life\"]\n[grid]\nnv = 5\nnf = 4\n",
            sim.traces[0].length_per_sample
        );
        std::fs::write(dir.join("run.toml"), text).unwrap();
        RunConfig::load(&dir.join("run.toml")).unwrap()
    }

    #[test]
    fn small_run_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = bundle(dir.path(), 6);
        let out = run_pipeline(&cfg, Execution::default()).unwrap();
        let m = &out.manifest;
        assert!(m.complete);
        for f in ["changepoints.csv", "draws_Ft.csv", "summary_Ft.csv", "surface_Ft.csv", "surface_life.dat", "taylor.json", "series/1.csv"] {
            assert!(m.outputs.contains_key(f), "missing {f}");
        }
        assert_eq!(m.inputs.len(), 7);
        assert_eq!(out.fits[0].surface.node_count(), 20);
        for (rel, digest) in &m.outputs {
            assert_eq!(&io::file_digest(&cfg.paths.output.join(rel)).unwrap(), digest);
        }
    }

    #[test]
    fn stage_failure_is_tagged_and_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = bundle(dir.path(), 4);
        std::fs::write(dir.path().join("traces/3.csv"), "sample,Ft,Ff,Fp\n0,1,1,1\n1,2,2,2\n").unwrap();
        cfg.segmentation.contact_threshold = 50.0;
        let err = run_pipeline(&cfg, Execution::Sequential).unwrap_err();
        assert_eq!(err.stage, "segment");
        let text = std::fs::read_to_string(cfg.paths.output.join("manifest.json")).unwrap();
        let m: Manifest = serde_json::from_str(&text).unwrap();
        assert!(!m.complete);
        assert_eq!(m.stages.last().unwrap().status, "failed");
    }

    #[test]
    fn missing_inputs_fail_before_computing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = bundle(dir.path(), 3);
        cfg.paths.traces = Some(dir.path().join("nowhere"));
        let err = run_pipeline(&cfg, Execution::Sequential).unwrap_err();
        assert_eq!((err.stage.as_str(), err.kind), ("config", ErrorKind::Validation));
        assert!(!cfg.paths.output.exists());
    }
}
