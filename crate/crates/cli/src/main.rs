//! `toolwear` command-line interface.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 finished with a
//! convergence warning (PSRF above threshold), 3 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use toolwear::config::RunConfig;
use toolwear::data::{Channel, ControlPoint, ExperimentRecord, ForceChannel};
use toolwear::design::{augmentation_plan_with_skip, DesignBounds};
use toolwear::diagnostics::{summarize_with, PSRF_THRESHOLD};
use toolwear::io::{self, ControlRow, DrawsFormat};
use toolwear::model::{HierarchicalModel, Parameterization, PriorConfig};
use toolwear::pipeline::{load_dataset, run_pipeline, ErrorKind};
use toolwear::predict::{fit_taylor, life_chains, GridSpec, PosteriorGp, DEFAULT_EXTRAPOLATION_MARGIN};
use toolwear::sampler::{run_chains, ChainSet, SamplerConfig};
use toolwear::segmentation::{extract_contact_phases, segment_trace};
use toolwear::simulate::{simulate, SimulationConfig};
use toolwear::Execution;

#[derive(Parser)]
#[command(name = "toolwear", version, about = "Tool-wear response surfaces from cutting-force data")]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "TOOLWEAR_OUT", default_value = "toolwear-out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    max_tree_depth: usize,
    #[arg(long, default_value_t = 0.8)]
    target_accept: f64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            n_chains: self.chains,
            n_warmup: self.warmup,
            n_samples: self.samples,
            max_tree_depth: self.max_tree_depth,
            target_accept: self.target_accept,
            seed: self.seed,
            ..SamplerConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sobol design over the feasible (v_c, f) rectangle.
    Design {
        #[arg(long, default_value_t = 20.0)]
        v_min: f64,
        #[arg(long, default_value_t = 60.0)]
        v_max: f64,
        #[arg(long, default_value_t = 20.0)]
        f_min: f64,
        #[arg(long, default_value_t = 50.0)]
        f_max: f64,
        #[arg(long, default_value_t = 21)]
        n_initial: usize,
        #[arg(long, default_value_t = 0)]
        n_reserve: usize,
        /// Leading Sobol points to drop.
        #[arg(long, default_value_t = toolwear::design::DEFAULT_SKIP)]
        skip: u64,
        /// Output CSV (default: <out>/design.csv).
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        dir: OutDir,
    },
    /// Split a raw trace into contact phases and write the (L, F) series.
    Segment {
        /// CSV with header sample,Ft,Ff,Fp.
        #[arg(long)]
        trace: PathBuf,
        /// Cutting length (m) per in-contact sample.
        #[arg(long)]
        length_per_sample: f64,
        #[arg(long)]
        penalty: Option<f64>,
        #[arg(long, default_value_t = 20)]
        min_seg_len: usize,
        /// Contact threshold on segment mean force (N).
        #[arg(long, default_value_t = 50.0)]
        threshold: f64,
        #[arg(long, default_value = "Ft")]
        channel: ForceChannel,
        /// Output series CSV (default: <out>/series.csv).
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        dir: OutDir,
    },
    /// Write a synthetic dataset with known ground truth and a ready config.
    Simulate {
        #[arg(long, default_value_t = 21)]
        experiments: usize,
        #[arg(long, default_value_t = 20)]
        seed: u64,
        /// Settings TOML overriding the generator defaults.
        #[arg(long)]
        settings: Option<PathBuf>,
        #[command(flatten)]
        dir: OutDir,
    },
    /// Sample the posterior of one channel.
    Fit {
        #[arg(long)]
        controls: PathBuf,
        /// Directory of <id>.csv series (not needed for the life channel).
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long, default_value = "Ft")]
        channel: Channel,
        /// TOML with prior scales.
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long, default_value = "centered", value_parser = parse_parameterization)]
        parameterization: Parameterization,
        #[arg(long, default_value = "csv")]
        format: DrawsFormat,
        #[arg(long, default_value_t = PSRF_THRESHOLD)]
        psrf_threshold: f64,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        dir: OutDir,
    },
    /// Summaries and split PSRF of a draws file.
    Diagnose {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long, default_value_t = PSRF_THRESHOLD)]
        psrf_threshold: f64,
        /// Also write the summary CSV here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Posterior-predictive surface over a grid.
    Predict {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        controls: PathBuf,
        #[arg(long, default_value = "Ft")]
        channel: Channel,
        /// v_min:v_max:nv,f_min:f_max:nf (default: training box, 20 x 20).
        #[arg(long)]
        grid: Option<GridSpec>,
        #[arg(long, default_value_t = DEFAULT_EXTRAPOLATION_MARGIN)]
        margin: f64,
        #[command(flatten)]
        dir: OutDir,
    },
    /// Fit v_c T^n = C to tool-life observations.
    Taylor {
        /// Controls CSV; rows with tool_life are used.
        #[arg(long, conflicts_with = "pair")]
        controls: Option<PathBuf>,
        /// A "v_c,T" pair; repeat for each observation.
        #[arg(long)]
        pair: Vec<String>,
    },
    /// Full pipeline from a run config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set sampler.chains=8.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Overrides paths.output.
        #[arg(long, env = "TOOLWEAR_OUT")]
        out: Option<PathBuf>,
    },
}

fn parse_parameterization(s: &str) -> Result<Parameterization, String> {
    match s {
        "centered" => Ok(Parameterization::Centered),
        "non-centered" => Ok(Parameterization::NonCentered),
        _ => Err(format!("unknown parameterization '{s}' (centered or non-centered)")),
    }
}

enum Failure {
    Validation(anyhow::Error),
    Internal(anyhow::Error),
}

type CmdResult = Result<bool, Failure>;

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Validation(e.into()))
    }
    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Internal(e.into()))
    }
}

fn io_err(e: io::IoError) -> Failure {
    if e.is_user_error() {
        Failure::Validation(e.into())
    } else {
        Failure::Internal(e.into())
    }
}

fn exec(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(3)
        }
    }
}

/// `Ok(false)` signals a convergence warning.
fn dispatch(cli: &Cli) -> CmdResult {
    let exec = exec(cli);
    match &cli.command {
        Command::Design {
            v_min,
            v_max,
            f_min,
            f_max,
            n_initial,
            n_reserve,
            skip,
            output,
            dir,
        } => {
            let bounds = DesignBounds::new(*v_min, *v_max, *f_min, *f_max).invalid()?;
            let plan = augmentation_plan_with_skip(&bounds, *n_initial, *n_reserve, *skip).invalid()?;
            let path = output.clone().unwrap_or_else(|| dir.out.join("design.csv"));
            io::write_design_csv(&path, &plan).map_err(io_err)?;
            println!("wrote {} design points to {}", plan.initial.len() + plan.reserve.len(), path.display());
            Ok(true)
        }
        Command::Segment {
            trace,
            length_per_sample,
            penalty,
            min_seg_len,
            threshold,
            channel,
            output,
            dir,
        } => {
            let raw = io::load_trace(trace, *length_per_sample).map_err(io_err)?;
            let seg = segment_trace(&raw, *channel, *penalty, *min_seg_len).invalid()?;
            let series = extract_contact_phases(&raw, &seg, *threshold).invalid()?;
            let path = output.clone().unwrap_or_else(|| dir.out.join("series.csv"));
            io::write_series(&path, &series).map_err(io_err)?;
            let cp_path = path.with_extension("changepoints.csv");
            io::write_changepoints_csv(&cp_path, &[(0, &seg, *threshold)]).map_err(io_err)?;
            println!(
                "{} changepoints, {} contact samples -> {}",
                seg.changepoints.len(),
                series.len(),
                path.display()
            );
            Ok(true)
        }
        Command::Simulate {
            experiments,
            seed,
            settings,
            dir,
        } => {
            let mut cfg = match settings {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).invalid()?;
                    toml::from_str::<SimulationConfig>(&text).invalid()?
                }
                None => SimulationConfig::default(),
            };
            cfg.n_experiments = *experiments;
            cfg.seed = *seed;
            write_simulation(&cfg, &dir.out)?;
            println!("wrote {} synthetic experiments to {}", experiments, dir.out.display());
            Ok(true)
        }
        Command::Fit {
            controls,
            series,
            channel,
            priors,
            parameterization,
            format,
            psrf_threshold,
            sampler,
            dir,
        } => {
            let priors = match priors {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).invalid()?;
                    toml::from_str::<PriorConfig>(&text).invalid()?
                }
                None => PriorConfig::default(),
            };
            let scfg = sampler.config();
            let chains = match channel {
                Channel::Force(f) => {
                    let series = series.as_ref().ok_or_else(|| Failure::Validation(anyhow!("--series is required for force channels")))?;
                    let ds = load_dataset(controls, series).map_err(io_err)?;
                    let model = HierarchicalModel::new(&ds.experiments, *f, priors, *parameterization).invalid()?;
                    run_chains(&model, &scfg, exec).internal()?
                }
                Channel::Life => {
                    let records = life_records(controls)?;
                    life_chains(&records, &priors, &scfg, exec).invalid()?
                }
            };
            let name = channel.name();
            let draws_path = dir.out.join(format!("draws_{name}.{}", format.extension()));
            io::write_draws(&draws_path, &chains, *format).map_err(io_err)?;
            let ok = report(&chains, *psrf_threshold, Some(&dir.out.join(format!("summary_{name}.csv"))), exec)?;
            println!("draws -> {}", draws_path.display());
            Ok(ok)
        }
        Command::Diagnose {
            draws,
            psrf_threshold,
            output,
        } => {
            let chains = io::read_draws(draws).map_err(io_err)?;
            report(&chains, *psrf_threshold, output.as_deref(), exec)
        }
        Command::Predict {
            draws,
            controls,
            channel,
            grid,
            margin,
            dir,
        } => {
            let chains = io::read_draws(draws).map_err(io_err)?;
            let rows = io::load_controls(controls).map_err(io_err)?;
            let posterior = match channel {
                Channel::Force(_) => {
                    let rows: Vec<&ControlRow> = rows
                        .iter()
                        .filter(|r| chains.param_index(&format!("beta[{}]", r.id)).is_some())
                        .collect();
                    if rows.is_empty() {
                        return Err(Failure::Validation(anyhow!("no controls row matches a beta[id] column of the draws")));
                    }
                    let ids: Vec<u32> = rows.iter().map(|r| r.id).collect();
                    let pts: Vec<ControlPoint> = rows.iter().map(|r| r.control).collect();
                    PosteriorGp::from_slopes(&chains, &ids, &pts, exec).invalid()?
                }
                Channel::Life => {
                    let with: Vec<&ControlRow> = rows.iter().filter(|r| r.tool_life.is_some()).collect();
                    let pts: Vec<ControlPoint> = with.iter().map(|r| r.control).collect();
                    let life: Vec<f64> = with.iter().map(|r| r.tool_life.unwrap()).collect();
                    PosteriorGp::from_life(&chains, &pts, &life, exec).invalid()?
                }
            };
            let grid = grid.unwrap_or_else(|| GridSpec::covering(posterior.training_controls()));
            let surface = posterior.surface(&grid, *channel, *margin, exec).invalid()?;
            let name = channel.name();
            let csv = dir.out.join(format!("surface_{name}.csv"));
            io::write_surface_csv(&csv, &surface).map_err(io_err)?;
            io::write_surface_matrix(&dir.out.join(format!("surface_{name}.dat")), &surface).map_err(io_err)?;
            println!("{} grid nodes -> {}", surface.node_count(), csv.display());
            Ok(true)
        }
        Command::Taylor { controls, pair } => {
            let pairs: Vec<(f64, f64)> = match controls {
                Some(p) => io::load_controls(p)
                    .map_err(io_err)?
                    .iter()
                    .filter_map(|r| r.tool_life.map(|t| (r.control.v_c, t)))
                    .collect(),
                None => pair.iter().map(|s| parse_pair(s)).collect::<Result<_, _>>().invalid()?,
            };
            let fit = fit_taylor(&pairs).invalid()?;
            println!("n = {}\nC = {}\nresidual_sd = {}", fit.n, fit.c, fit.residual_sd);
            Ok(true)
        }
        Command::Run { config, overrides, out } => {
            let mut cfg = RunConfig::load(config).invalid()?;
            for o in overrides {
                cfg.apply_override(o).invalid()?;
            }
            if let Some(out) = out {
                cfg.paths.output = out.clone();
            }
            let outcome = run_pipeline(&cfg, exec).map_err(|e| match e.kind {
                ErrorKind::Validation => Failure::Validation(e.into()),
                ErrorKind::Internal => Failure::Internal(e.into()),
            })?;
            for (ch, status) in &outcome.manifest.convergence {
                let r = status.max_psrf.map_or("-".into(), |r| format!("{r:.4}"));
                println!("{ch}: max PSRF {r}, divergences {}", status.divergences);
                if !status.unconverged.is_empty() {
                    eprintln!("warning: {ch}: PSRF above threshold for {}", status.unconverged.join(", "));
                }
            }
            println!("manifest -> {}", outcome.manifest_path.display());
            Ok(outcome.converged())
        }
    }
}

fn parse_pair(s: &str) -> anyhow::Result<(f64, f64)> {
    let (v, t) = s.split_once(',').ok_or_else(|| anyhow!("expected v_c,T, got '{s}'"))?;
    Ok((v.trim().parse()?, t.trim().parse()?))
}

fn life_records(controls: &Path) -> Result<Vec<ExperimentRecord>, Failure> {
    Ok(io::load_controls(controls)
        .map_err(io_err)?
        .into_iter()
        .map(|r| ExperimentRecord {
            id: r.id,
            control: r.control,
            series: Default::default(),
            tool_life: r.tool_life,
        })
        .collect())
}

fn report(chains: &ChainSet, threshold: f64, csv: Option<&Path>, exec: Execution) -> CmdResult {
    let summary = summarize_with(chains, exec).invalid()?;
    if let Some(p) = csv {
        io::write_summary_csv(p, &summary).map_err(io_err)?;
    }
    print!("{}", io::format_report("posterior summary", &summary, chains, threshold));
    Ok(summary.unconverged(threshold).is_empty())
}

fn write_simulation(cfg: &SimulationConfig, out: &Path) -> Result<(), Failure> {
    let sim = simulate(cfg).invalid()?;
    let rows: Vec<ControlRow> = sim
        .records
        .iter()
        .map(|r| ControlRow {
            id: r.id,
            control: r.control,
            tool_life: r.tool_life,
        })
        .collect();
    io::write_controls(&out.join("controls.csv"), &rows).map_err(io_err)?;
    for (r, t) in sim.records.iter().zip(&sim.traces) {
        io::write_series(&out.join(format!("series/{}.csv", r.id)), &r.series).map_err(io_err)?;
        io::write_trace(&out.join(format!("traces/{}.csv", r.id)), t).map_err(io_err)?;
    }
    let truth = serde_json::to_string_pretty(&sim.truth).internal()? + "\n";
    io::write_text(&out.join("truth.json"), &truth).map_err(io_err)?;
    let run = format!(
        "seed = {}\n\n[paths]\ncontrols = \"controls.csv\"\ntraces = \"traces\"\noutput = \"out\"\n\n[segmentation]\nlength_per_sample = {}\n",
        cfg.seed,
        sim.traces[0].length_per_sample
    );
    io::write_text(&out.join("run.toml"), &run).map_err(io_err)?;
    Ok(())
}
