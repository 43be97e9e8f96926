//! File formats.
//!
//! All numbers are written with Rust's shortest round-trip decimal form, so
//! reading a written file reproduces every `f64` exactly. CSV readers accept
//! `#` comment lines and surrounding whitespace.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ControlPoint, ExperimentSeries};
use crate::design::AugmentationPlan;
use crate::diagnostics::FitSummary;
use crate::predict::SurfaceGrid;
use crate::sampler::ChainSet;
use crate::segmentation::{RawTrace, Segmentation};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

impl IoError {
    fn io(path: &Path, cause: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            cause,
        }
    }

    /// Missing or unreadable inputs are the caller's problem; other I/O
    /// failures are not.
    pub fn is_user_error(&self) -> bool {
        match self {
            IoError::Io { cause, .. } => matches!(
                cause.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied | std::io::ErrorKind::IsADirectory | std::io::ErrorKind::NotADirectory
            ),
            _ => true,
        }
    }

    fn parse(path: &Path, line: u64, msg: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn invalid(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Invalid {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

/// One row of the controls table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub id: u32,
    pub control: ControlPoint,
    pub tool_life: Option<f64>,
}

fn reader(path: &Path) -> Result<csv::Reader<BufReader<File>>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(BufReader::new(file)))
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| IoError::io(path, e))?))
}

/// Write `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| IoError::io(path, e))?;
    w.flush().map_err(|e| IoError::io(path, e))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<BufReader<File>>, required: &[&str], optional: &[&str]) -> Result<Vec<String>, IoError> {
    let headers = rdr.headers().map_err(|e| IoError::parse(path, 1, e.to_string()))?.clone();
    let line = headers.position().map_or(1, |p| p.line());
    let got: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    let ok = got.len() >= required.len()
        && got.len() <= required.len() + optional.len()
        && got.iter().zip(required.iter().chain(optional)).all(|(g, w)| g.eq_ignore_ascii_case(w));
    if !ok {
        let mut want = required.join(",");
        if !optional.is_empty() {
            want.push_str(&format!("[,{}]", optional.join(",")));
        }
        return Err(IoError::parse(path, line, format!("expected header {want}, got {}", got.join(","))));
    }
    Ok(got)
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, IoError> {
    let raw = rec
        .get(i)
        .ok_or_else(|| IoError::parse(path, line, format!("missing column '{name}'")))?;
    raw.parse()
        .map_err(|_| IoError::parse(path, line, format!("cannot parse {name} '{raw}'")))
}

fn records(path: &Path, rdr: &mut csv::Reader<BufReader<File>>, width: usize) -> Result<Vec<(u64, csv::StringRecord)>, IoError> {
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            IoError::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(IoError::parse(path, line, format!("expected {width} fields, got {}", rec.len())));
        }
        out.push((line, rec));
    }
    Ok(out)
}

/// Controls CSV with header `id,v_c,f[,tool_life]`. An empty `tool_life`
/// cell means unknown.
pub fn load_controls(path: &Path) -> Result<Vec<ControlRow>, IoError> {
    let mut rdr = reader(path)?;
    let header = check_header(path, &mut rdr, &["id", "v_c", "f"], &["tool_life"])?;
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (line, rec) in records(path, &mut rdr, header.len())? {
        let id: u32 = field(path, line, &rec, 0, "id")?;
        let v_c: f64 = field(path, line, &rec, 1, "v_c")?;
        let f: f64 = field(path, line, &rec, 2, "f")?;
        if !(v_c.is_finite() && v_c > 0.0 && f.is_finite() && f > 0.0) {
            return Err(IoError::parse(path, line, format!("settings must be positive, got v_c={v_c}, f={f}")));
        }
        let tool_life = match rec.get(3) {
            None | Some("") => None,
            Some(_) => {
                let t: f64 = field(path, line, &rec, 3, "tool_life")?;
                if !(t.is_finite() && t > 0.0) {
                    return Err(IoError::parse(path, line, format!("tool life must be positive, got {t}")));
                }
                Some(t)
            }
        };
        if !seen.insert(id) {
            return Err(IoError::parse(path, line, format!("duplicate id {id}")));
        }
        rows.push(ControlRow {
            id,
            control: ControlPoint::new(v_c, f),
            tool_life,
        });
    }
    Ok(rows)
}

pub fn write_controls(path: &Path, rows: &[ControlRow]) -> Result<(), IoError> {
    let mut s = String::from("id,v_c,f,tool_life\n");
    for r in rows {
        let life = r.tool_life.map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.id, r.control.v_c, r.control.f, life);
    }
    write_text(path, &s)
}

/// Series CSV with header `L,Ft,Ff,Fp`, validated on load.
pub fn load_series(path: &Path) -> Result<ExperimentSeries, IoError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["L", "Ft", "Ff", "Fp"], &[])?;
    let mut s = ExperimentSeries::default();
    let mut lines = Vec::new();
    for (line, rec) in records(path, &mut rdr, 4)? {
        s.length.push(field(path, line, &rec, 0, "L")?);
        s.ft.push(field(path, line, &rec, 1, "Ft")?);
        s.ff.push(field(path, line, &rec, 2, "Ff")?);
        s.fp.push(field(path, line, &rec, 3, "Fp")?);
        lines.push(line);
    }
    use crate::data::SeriesError as E;
    s.validate().map_err(|e| match e {
        E::NonFinite { row } | E::NonMonotoneLength { row } => IoError::parse(path, lines[row], e.to_string()),
        other => IoError::invalid(path, other.to_string()),
    })?;
    Ok(s)
}

pub fn write_series(path: &Path, s: &ExperimentSeries) -> Result<(), IoError> {
    let mut out = String::from("L,Ft,Ff,Fp\n");
    for i in 0..s.len() {
        let _ = writeln!(out, "{},{},{},{}", s.length[i], s.ft[i], s.ff[i], s.fp[i]);
    }
    write_text(path, &out)
}

/// Raw trace CSV with header `sample,Ft,Ff,Fp`.
pub fn load_trace(path: &Path, length_per_sample: f64) -> Result<RawTrace, IoError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["sample", "Ft", "Ff", "Fp"], &[])?;
    let (mut t, mut ft, mut ff, mut fp) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in records(path, &mut rdr, 4)? {
        let sample: u64 = field(path, line, &rec, 0, "sample")?;
        if t.last().is_some_and(|&prev| sample <= prev) {
            return Err(IoError::parse(path, line, "sample index must increase"));
        }
        t.push(sample);
        ft.push(field(path, line, &rec, 1, "Ft")?);
        ff.push(field(path, line, &rec, 2, "Ff")?);
        fp.push(field(path, line, &rec, 3, "Fp")?);
    }
    RawTrace::new(t, ft, ff, fp, length_per_sample).map_err(|e| IoError::invalid(path, e.to_string()))
}

pub fn write_trace(path: &Path, t: &RawTrace) -> Result<(), IoError> {
    let mut out = String::from("sample,Ft,Ff,Fp\n");
    for i in 0..t.len() {
        let _ = writeln!(out, "{},{},{},{}", t.sample[i], t.ft[i], t.ff[i], t.fp[i]);
    }
    write_text(path, &out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawsFormat {
    #[default]
    Csv,
    Binary,
}

impl DrawsFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DrawsFormat::Csv => "csv",
            DrawsFormat::Binary => "bin",
        }
    }
}

impl std::str::FromStr for DrawsFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(DrawsFormat::Csv),
            "binary" | "bin" => Ok(DrawsFormat::Binary),
            _ => Err(format!("unknown draws format '{s}' (expected csv or binary)")),
        }
    }
}

const BINARY_MAGIC: &[u8; 8] = b"TWDRAWS1";

/// Everything in a [`ChainSet`] except the draws themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DrawsHeader {
    param_names: Vec<String>,
    n_chains: usize,
    n_warmup: usize,
    n_retained: usize,
    seed: u64,
    accept_stats: Vec<f64>,
    divergences: Vec<usize>,
    step_sizes: Vec<f64>,
    /// Values follow as little-endian f64, ordered chain, iteration, parameter.
    layout: String,
}

const LAYOUT: &str = "f64-le chain-major [chain][iteration][parameter]";

impl DrawsHeader {
    fn of(c: &ChainSet) -> Self {
        Self {
            param_names: c.param_names.clone(),
            n_chains: c.n_chains(),
            n_warmup: c.n_warmup,
            n_retained: c.n_retained,
            seed: c.seed,
            accept_stats: c.accept_stats.clone(),
            divergences: c.divergences.clone(),
            step_sizes: c.step_sizes.clone(),
            layout: LAYOUT.to_string(),
        }
    }

    fn into_chains(self, draws: Vec<Vec<Vec<f64>>>) -> ChainSet {
        ChainSet {
            param_names: self.param_names,
            draws,
            n_warmup: self.n_warmup,
            n_retained: self.n_retained,
            seed: self.seed,
            accept_stats: self.accept_stats,
            divergences: self.divergences,
            step_sizes: self.step_sizes,
        }
    }

    fn check(&self, path: &Path) -> Result<(), IoError> {
        let n = self.n_chains;
        if self.accept_stats.len() != n || self.divergences.len() != n || self.step_sizes.len() != n {
            return Err(IoError::invalid(path, "per-chain metadata does not match the chain count"));
        }
        Ok(())
    }
}

pub fn write_draws(path: &Path, chains: &ChainSet, format: DrawsFormat) -> Result<(), IoError> {
    match format {
        DrawsFormat::Csv => write_draws_csv(path, chains),
        DrawsFormat::Binary => write_draws_binary(path, chains),
    }
}

/// CSV with `# key: json` metadata lines, then `chain,iteration,<names>`.
fn write_draws_csv(path: &Path, c: &ChainSet) -> Result<(), IoError> {
    let header = DrawsHeader::of(c);
    let mut out = String::new();
    let _ = writeln!(out, "# toolwear-draws: 1");
    let _ = writeln!(out, "# meta: {}", serde_json::to_string(&header).expect("header serializes"));
    out.push_str("chain,iteration");
    for n in &c.param_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (ci, chain) in c.draws.iter().enumerate() {
        for (it, d) in chain.iter().enumerate() {
            let _ = write!(out, "{ci},{it}");
            for v in d {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    write_text(path, &out)
}

fn write_draws_binary(path: &Path, c: &ChainSet) -> Result<(), IoError> {
    let header = serde_json::to_vec(&DrawsHeader::of(c)).expect("header serializes");
    let mut w = create(path)?;
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| IoError::io(path, e));
    put(BINARY_MAGIC)?;
    put(&(header.len() as u64).to_le_bytes())?;
    put(&header)?;
    let mut buf = Vec::with_capacity(8 * c.n_params() * c.n_retained.max(1));
    for chain in &c.draws {
        buf.clear();
        for d in chain {
            for v in d {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        put(&buf)?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Reads either draws format, detected from the first bytes.
pub fn read_draws(path: &Path) -> Result<ChainSet, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        read_draws_binary(path, &bytes)
    } else {
        read_draws_csv(path, &bytes)
    }
}

fn read_draws_binary(path: &Path, bytes: &[u8]) -> Result<ChainSet, IoError> {
    let bad = |m: &str| IoError::invalid(path, m.to_string());
    let rest = &bytes[BINARY_MAGIC.len()..];
    if rest.len() < 8 {
        return Err(bad("truncated header"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: DrawsHeader = serde_json::from_slice(&rest[..hlen]).map_err(|e| bad(&format!("bad header: {e}")))?;
    header.check(path)?;
    if header.layout != LAYOUT {
        return Err(bad(&format!("unsupported layout '{}'", header.layout)));
    }
    let body = &rest[hlen..];
    let p = header.param_names.len();
    let expected = 8 * p * header.n_retained * header.n_chains;
    if body.len() != expected {
        return Err(bad(&format!("expected {expected} bytes of draws, found {}", body.len())));
    }
    let mut values = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let draws = (0..header.n_chains)
        .map(|_| {
            (0..header.n_retained)
                .map(|_| values.by_ref().take(p).collect())
                .collect()
        })
        .collect();
    Ok(header.into_chains(draws))
}

fn read_draws_csv(path: &Path, bytes: &[u8]) -> Result<ChainSet, IoError> {
    let text = std::str::from_utf8(bytes).map_err(|_| IoError::invalid(path, "draws file is neither UTF-8 CSV nor binary"))?;
    let meta = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# meta:"))
        .ok_or_else(|| IoError::invalid(path, "missing '# meta:' line"))?;
    let header: DrawsHeader = serde_json::from_str(meta.trim()).map_err(|e| IoError::invalid(path, format!("bad metadata: {e}")))?;
    header.check(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let cols = rdr.headers().map_err(|e| IoError::parse(path, 1, e.to_string()))?.clone();
    let names: Vec<&str> = cols.iter().skip(2).collect();
    if names != header.param_names.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(IoError::invalid(path, "column names do not match metadata"));
    }
    let p = names.len();
    let mut draws = vec![Vec::with_capacity(header.n_retained); header.n_chains];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IoError::parse(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != p + 2 {
            return Err(IoError::parse(path, line, format!("expected {} fields, got {}", p + 2, rec.len())));
        }
        let chain: usize = field(path, line, &rec, 0, "chain")?;
        let iter: usize = field(path, line, &rec, 1, "iteration")?;
        if chain >= header.n_chains || iter != draws[chain].len() {
            return Err(IoError::parse(path, line, "rows must be ordered by chain then iteration"));
        }
        let row = (0..p)
            .map(|j| field(path, line, &rec, j + 2, &header.param_names[j]))
            .collect::<Result<Vec<f64>, _>>()?;
        draws[chain].push(row);
    }
    if draws.iter().any(|c| c.len() != header.n_retained) {
        return Err(IoError::invalid(path, "row count does not match metadata"));
    }
    Ok(header.into_chains(draws))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `name,mean,sd,q2.5,q50,q97.5,psrf` per parameter.
pub fn write_summary_csv(path: &Path, s: &FitSummary) -> Result<(), IoError> {
    let mut out = String::from("name,mean,sd,q2.5,q50,q97.5,psrf\n");
    for p in &s.params {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", p.name, p.mean, p.sd, p.q025, p.q50, p.q975, opt(p.psrf));
    }
    write_text(path, &out)
}

/// Fixed-width text report of a fit.
pub fn format_report(title: &str, s: &FitSummary, chains: &ChainSet, threshold: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{} chains x {} draws after {} warmup, seed {}",
        chains.n_chains(),
        chains.n_retained,
        chains.n_warmup,
        chains.seed
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<18} {:>12} {:>11} {:>12} {:>12} {:>12} {:>7}", "parameter", "mean", "sd", "2.5%", "50%", "97.5%", "R-hat");
    for p in &s.params {
        let r = p.psrf.map_or("-".to_string(), |r| format!("{r:.3}"));
        let _ = writeln!(
            out,
            "{:<18} {:>12.5} {:>11.5} {:>12.5} {:>12.5} {:>12.5} {:>7}",
            p.name, p.mean, p.sd, p.q025, p.q50, p.q975, r
        );
    }
    let _ = writeln!(out);
    for c in &s.chains {
        let _ = writeln!(
            out,
            "chain {}: step size {:.4}, mean accept {:.3}, divergences {}",
            c.chain, c.step_size, c.mean_accept, c.divergences
        );
    }
    let bad = s.unconverged(threshold);
    if bad.is_empty() {
        let _ = writeln!(out, "all R-hat <= {threshold}");
    } else {
        let names: Vec<&str> = bad.iter().map(|p| p.name.as_str()).collect();
        let _ = writeln!(out, "WARNING: R-hat > {threshold} for {}", names.join(", "));
    }
    if chains.divergence_warning() {
        let _ = writeln!(out, "WARNING: {:.1}% of transitions diverged", 100.0 * chains.divergence_rate());
    }
    out
}

/// Long format `v_c,f,mean,sd`.
pub fn write_surface_csv(path: &Path, g: &SurfaceGrid) -> Result<(), IoError> {
    let mut out = String::from("v_c,f,mean,sd\n");
    for (v, f, m, s) in g.nodes() {
        let _ = writeln!(out, "{v},{f},{m},{s}");
    }
    write_text(path, &out)
}

/// Gnuplot `nonuniform matrix` layout of the predictive mean: the first row
/// holds the feed axis, each further row a cutting speed and its values.
pub fn write_surface_matrix(path: &Path, g: &SurfaceGrid) -> Result<(), IoError> {
    let mut out = format!("# {} predictive mean; rows v_c, columns f\n", g.channel);
    out.push_str(&g.f_axis.len().to_string());
    for f in &g.f_axis {
        let _ = write!(out, " {f}");
    }
    out.push('\n');
    for (i, v) in g.v_axis.iter().enumerate() {
        out.push_str(&v.to_string());
        for j in 0..g.f_axis.len() {
            let _ = write!(out, " {}", g.mean_at(i, j));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Long-format surface back from [`write_surface_csv`].
pub fn read_surface_csv(path: &Path, channel: crate::data::Channel) -> Result<SurfaceGrid, IoError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["v_c", "f", "mean", "sd"], &[])?;
    let (mut v_axis, mut f_axis, mut mean, mut sd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in records(path, &mut rdr, 4)? {
        let v: f64 = field(path, line, &rec, 0, "v_c")?;
        let f: f64 = field(path, line, &rec, 1, "f")?;
        if v_axis.last() != Some(&v) {
            v_axis.push(v);
        }
        if v_axis.len() == 1 {
            f_axis.push(f);
        }
        mean.push(field(path, line, &rec, 2, "mean")?);
        sd.push(field(path, line, &rec, 3, "sd")?);
    }
    if v_axis.len() * f_axis.len() != mean.len() {
        return Err(IoError::invalid(path, "rows do not form a regular grid"));
    }
    Ok(SurfaceGrid {
        v_axis,
        f_axis,
        mean,
        sd,
        channel,
    })
}

/// `index,v_c,f,priority` with priority `initial` or `reserve`.
pub fn write_design_csv(path: &Path, plan: &AugmentationPlan) -> Result<(), IoError> {
    let mut out = String::from("index,v_c,f,priority\n");
    for (p, initial) in plan.all() {
        let _ = writeln!(out, "{},{},{},{}", p.index, p.v_c, p.f, if initial { "initial" } else { "reserve" });
    }
    write_text(path, &out)
}

/// `id,segment,start,end,mean,var,contact` per segment of every trace.
pub fn write_changepoints_csv(path: &Path, rows: &[(u32, &Segmentation, f64)]) -> Result<(), IoError> {
    let mut out = String::from("id,segment,start,end,mean,var,contact\n");
    for (id, seg, threshold) in rows {
        for (k, ((a, b), (m, v))) in seg
            .bounds()
            .into_iter()
            .zip(seg.segment_means.iter().zip(&seg.segment_vars))
            .enumerate()
        {
            let _ = writeln!(out, "{id},{k},{a},{b},{m},{v},{}", *m > *threshold);
        }
    }
    write_text(path, &out)
}

/// SHA-256 of a file as lowercase hex.
pub fn file_digest(path: &Path) -> Result<String, IoError> {
    use sha2::{Digest, Sha256};
    let mut file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| IoError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
