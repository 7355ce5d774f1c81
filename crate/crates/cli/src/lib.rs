//! Staged command-line pipeline: ingest, build snapshots, train, evaluate
//! and inspect, each reading and writing artifacts in one output directory.

pub mod config;

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use dhnn_core::community::partition_lines;
use dhnn_core::dhnn::{DhnnError, DhnnModel};
use dhnn_core::eval::{self, MetricsOn, MetricsReport, METRICS_HEADER};
use dhnn_core::hypergraph::{read_archive, write_archive, EdgeSource, HypergraphSnapshot};
use dhnn_core::ingest::{
    chronological_split, load_csv, log_returns, make_windows, rolling_normalize_with_stats, split_sizes, CsvSchema,
    IngestError, SeriesTable, WindowSample,
};
use dhnn_core::neural::NeuralError;
use dhnn_core::spectral::{pearson_correlation, rmt_decompose, SPECTRUM_DUMP_HEADER};
use dhnn_core::synthetic::{generate_synthetic, labels_text, SyntheticSpec};
use ndarray::Array1;
use thiserror::Error;

pub use config::RunConfig;

pub const DATASET_FILE: &str = "dataset.csv";
pub const NORM_STATS_FILE: &str = "norm_stats.csv";
pub const CONFIG_ECHO_FILE: &str = "run_config.toml";
pub const SNAPSHOTS_FILE: &str = "snapshots.txt";
pub const TRAINED_SNAPSHOTS_FILE: &str = "snapshots_trained.txt";
pub const COM_PARTITIONS_FILE: &str = "partitions_com.txt";
pub const ATT_PARTITIONS_FILE: &str = "partitions_att.txt";
pub const SPECTRUM_FILE: &str = "spectrum.txt";
pub const INIT_CHECKPOINT_FILE: &str = "init.ckpt";
pub const MODEL_CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const LOG_FILE: &str = "run.log";
pub const LOCK_FILE: &str = ".lock";

/// Exit codes, also listed in `--help`.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;
pub const EXIT_IO: i32 = 6;
pub const EXIT_LOCKED: i32 = 7;

pub const EXIT_CODES_HELP: &str = "Exit codes:
  0  success
  2  usage or configuration error
  3  missing input file or earlier-stage artifact
  4  validation failure (data or configuration inconsistent with the model)
  5  numeric abort (non-finite loss or gradient)
  6  I/O error while writing artifacts
  7  output directory locked by another run";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),
    #[error("validation: {0}")]
    Validation(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("i/o on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output directory is locked ({} exists)", .0.display())]
    Locked(PathBuf),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => EXIT_USAGE,
            Self::MissingInput(_) => EXIT_MISSING_INPUT,
            Self::Validation(_) => EXIT_VALIDATION,
            Self::Numeric(_) => EXIT_NUMERIC,
            Self::Io { .. } => EXIT_IO,
            Self::Locked(_) => EXIT_LOCKED,
        }
    }
}

impl From<DhnnError> for CliError {
    fn from(e: DhnnError) -> Self {
        match &e {
            DhnnError::NonFiniteLoss { .. }
            | DhnnError::Optimizer {
                source: NeuralError::NonFiniteGradient(_),
                ..
            } => Self::Numeric(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { path, .. } => Self::MissingInput(PathBuf::from(path)),
            other => Self::Validation(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    require(path)?;
    fs::read(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(source) => Err(CliError::Io { path, source }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Append a timestamped line to the sidecar log. Timestamps and timings
/// live only here so every other artifact is reproducible.
fn log_line(dir: &Path, command: &str, started: Instant, detail: &str) -> Result<(), CliError> {
    let path = dir.join(LOG_FILE);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    writeln!(
        f,
        "{stamp} {command} wall_time={:.3}s {detail}",
        started.elapsed().as_secs_f64()
    )
    .map_err(io_err(&path))
}

/// Normalised table and target statistics, as produced by `ingest`.
pub struct Prepared {
    pub table: SeriesTable,
    /// `(mean, std)` of the target per normalised row.
    pub target_stats: Vec<(f64, f64)>,
}

fn delimiter(cfg: &RunConfig) -> u8 {
    cfg.data.delimiter.as_bytes()[0]
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let path = cfg.data_path();
    require(&path)?;
    let schema = CsvSchema {
        target_column: cfg.data.target_column.clone(),
        delimiter: delimiter(cfg),
        has_header: cfg.data.has_header,
    };
    let raw = load_csv(&path, &schema)?;
    cfg.model.validate(raw.n_series())?;
    let base = if cfg.data.log_returns { log_returns(&raw)? } else { raw };
    let (table, stats) = rolling_normalize_with_stats(&base, cfg.norm_window())?;
    let ti = table.target_index;
    let target_stats = (0..table.len())
        .map(|r| (stats.mean[[r, ti]], stats.std[[r, ti]]))
        .collect();
    Ok(Prepared { table, target_stats })
}

fn table_csv(table: &SeriesTable) -> String {
    let mut out = table.names.join(",");
    out.push('\n');
    for row in table.values.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// `ingest`: load, impute, transform and normalise the dataset.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<String, CliError> {
    let started = Instant::now();
    let prepared = prepare(cfg)?;
    let dir = cfg.output_dir();
    let _lock = DirLock::acquire(&dir)?;
    write_file(&dir.join(DATASET_FILE), table_csv(&prepared.table).as_bytes())?;
    let mut stats = String::from("row, mean, std\n");
    for (r, (m, s)) in prepared.target_stats.iter().enumerate() {
        writeln!(stats, "{r}, {m}, {s}").unwrap();
    }
    write_file(&dir.join(NORM_STATS_FILE), stats.as_bytes())?;
    write_file(&dir.join(CONFIG_ECHO_FILE), cfg.render().as_bytes())?;
    let msg = format!(
        "ingested {} rows × {} series (target {})",
        prepared.table.len(),
        prepared.table.n_series(),
        prepared.table.target_name()
    );
    log_line(&dir, "ingest", started, &msg)?;
    Ok(msg)
}

fn load_dataset(cfg: &RunConfig) -> Result<SeriesTable, CliError> {
    let path = cfg.output_dir().join(DATASET_FILE);
    require(&path)?;
    let schema = CsvSchema::new(cfg.data.target_column.clone());
    let table = load_csv(&path, &schema)?;
    cfg.model.validate(table.n_series())?;
    Ok(table)
}

fn load_target_stats(dir: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let path = dir.join(NORM_STATS_FILE);
    let text = String::from_utf8(read_bytes(&path)?)
        .map_err(|_| CliError::Validation(format!("{} is not UTF-8", path.display())))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split(',').map(str::trim).collect();
            match parts.as_slice() {
                [_, m, s] => match (m.parse(), s.parse()) {
                    (Ok(m), Ok(s)) => Ok((m, s)),
                    _ => Err(CliError::Validation(format!("bad line in {}: {l:?}", path.display()))),
                },
                _ => Err(CliError::Validation(format!("bad line in {}: {l:?}", path.display()))),
            }
        })
        .collect()
}

fn windows(cfg: &RunConfig, table: &SeriesTable) -> Result<Vec<WindowSample>, CliError> {
    let samples = make_windows(table, cfg.model.window_m, cfg.model.horizon_q)?;
    split_sizes(samples.len(), cfg.split())?;
    Ok(samples)
}

fn write_snapshots(path: &Path, snapshots: &[HypergraphSnapshot]) -> Result<(), CliError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_archive(snapshots, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn load_snapshots(path: &Path, samples: &[WindowSample]) -> Result<Vec<HypergraphSnapshot>, CliError> {
    require(path)?;
    let f = File::open(path).map_err(io_err(path))?;
    let snaps = read_archive(BufReader::new(f)).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if snaps.len() != samples.len() {
        return Err(CliError::Validation(format!(
            "{} holds {} snapshots but the dataset yields {} windows",
            path.display(),
            snaps.len(),
            samples.len()
        )));
    }
    Ok(snaps)
}

/// `build`: initialise the model and construct one snapshot per window.
pub fn cmd_build(cfg: &RunConfig) -> Result<String, CliError> {
    let started = Instant::now();
    let table = load_dataset(cfg)?;
    let samples = windows(cfg, &table)?;
    let model = DhnnModel::new(cfg.model.clone(), table.n_series())?;
    let snapshots = model.build_snapshots(&samples)?;
    let spectrum = if cfg.output.dump_spectrum {
        let mut out = format!("{SPECTRUM_DUMP_HEADER}\n");
        for s in &samples {
            let corr = pearson_correlation(s.features.view()).map_err(|e| CliError::Validation(e.to_string()))?;
            let d = rmt_decompose(&corr, s.features.nrows()).map_err(|e| CliError::Validation(e.to_string()))?;
            out.push_str(&d.dump_line(s.window_end));
            out.push('\n');
        }
        Some(out)
    } else {
        None
    };
    let dir = cfg.output_dir();
    let _lock = DirLock::acquire(&dir)?;
    write_snapshots(&dir.join(SNAPSHOTS_FILE), &snapshots)?;
    write_file(&dir.join(INIT_CHECKPOINT_FILE), &model.to_checkpoint())?;
    for (source, name) in [(EdgeSource::Com, COM_PARTITIONS_FILE), (EdgeSource::Att, ATT_PARTITIONS_FILE)] {
        let mut text = String::new();
        for s in &snapshots {
            text.push_str(&partition_lines(s.window_end, &table.names, &s.assignment(source)));
        }
        write_file(&dir.join(name), text.as_bytes())?;
    }
    if let Some(text) = spectrum {
        write_file(&dir.join(SPECTRUM_FILE), text.as_bytes())?;
    }
    let n_edges: usize = snapshots.iter().map(|s| s.n_edges()).sum();
    let msg = format!(
        "built {} snapshots ({:.2} hyperedges per window)",
        snapshots.len(),
        n_edges as f64 / snapshots.len() as f64
    );
    log_line(&dir, "build", started, &msg)?;
    Ok(msg)
}

fn split_three<T>(items: &mut [T], sizes: (usize, usize, usize)) -> (&mut [T], &mut [T], &mut [T]) {
    let (train, rest) = items.split_at_mut(sizes.0);
    let (val, test) = rest.split_at_mut(sizes.1);
    (train, val, test)
}

/// `train`: fit the model on the training split with validation-based
/// early stopping.
pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let started = Instant::now();
    let dir = cfg.output_dir();
    let table = load_dataset(cfg)?;
    let samples = windows(cfg, &table)?;
    let mut snapshots = load_snapshots(&dir.join(SNAPSHOTS_FILE), &samples)?;
    let init = DhnnModel::from_checkpoint(&read_bytes(&dir.join(INIT_CHECKPOINT_FILE))?)?;
    let mut model = DhnnModel::from_params(cfg.model.clone(), table.n_series(), init.params)?;
    let sizes = split_sizes(samples.len(), cfg.split())?;
    let (train_s, val_s, test_s) = {
        let (a, b, c) = chronological_split(&samples, cfg.split())?;
        (a, b, c)
    };
    let report = {
        let (ts, vs, _) = split_three(&mut snapshots, sizes);
        model.train(&train_s, ts, &val_s, vs)?
    };
    if cfg.model.joint() {
        let (_, _, tests) = split_three(&mut snapshots, sizes);
        for (snap, sample) in tests.iter_mut().zip(&test_s) {
            *snap = model.refresh_snapshot(sample, snap)?;
        }
    }
    let _lock = DirLock::acquire(&dir)?;
    write_file(&dir.join(MODEL_CHECKPOINT_FILE), &model.to_checkpoint())?;
    write_file(&dir.join(TRAIN_REPORT_FILE), report.to_text().as_bytes())?;
    if cfg.model.joint() {
        write_snapshots(&dir.join(TRAINED_SNAPSHOTS_FILE), &snapshots)?;
    }
    let msg = format!(
        "trained {} epochs ({}), best epoch {} with validation loss {}",
        report.epochs.len(),
        report.stop_reason.as_str(),
        report.best_epoch,
        report.best_val_loss
    );
    log_line(&dir, "train", started, &format!("{msg} training_wall_time={:.3}s", report.wall_time.as_secs_f64()))?;
    Ok(msg)
}

/// Test-split metrics of the trained model and of the persistence
/// baseline, in that order.
pub fn evaluate_reports(cfg: &RunConfig) -> Result<Vec<MetricsReport>, CliError> {
    let dir = cfg.output_dir();
    let table = load_dataset(cfg)?;
    let samples = windows(cfg, &table)?;
    let model = DhnnModel::from_checkpoint(&read_bytes(&dir.join(MODEL_CHECKPOINT_FILE))?)?;
    if model.n_series != table.n_series() {
        return Err(CliError::Validation(format!(
            "checkpoint expects {} series, dataset has {}",
            model.n_series,
            table.n_series()
        )));
    }
    let snap_file = if model.config.joint() {
        TRAINED_SNAPSHOTS_FILE
    } else {
        SNAPSHOTS_FILE
    };
    let snapshots = load_snapshots(&dir.join(snap_file), &samples)?;
    let (train, val, _) = split_sizes(samples.len(), cfg.split())?;
    let start = train + val;
    let test = &samples[start..];
    let preds = model.predict_all(test, &snapshots[start..])?;
    let q = model.config.horizon_q;
    let baseline = eval::persistence_baseline(test, table.target_index, q);
    let truth: Vec<Array1<f64>> = test.iter().map(|s| s.target.clone()).collect();

    let scale = |rows: &[Array1<f64>], stats: Option<&[(f64, f64)]>| -> Result<Vec<f64>, CliError> {
        let mut out = Vec::with_capacity(rows.len() * q);
        for (s, r) in test.iter().zip(rows) {
            for (k, v) in r.iter().enumerate() {
                out.push(match stats {
                    None => *v,
                    Some(st) => {
                        let row = s.window_end + 1 + k;
                        let (m, sd) = st.get(row).copied().ok_or_else(|| {
                            CliError::Validation(format!("{NORM_STATS_FILE} has no row {row}"))
                        })?;
                        v * sd + m
                    }
                });
            }
        }
        Ok(out)
    };
    let stats = match cfg.metrics_on()? {
        MetricsOn::Normalized => None,
        MetricsOn::Raw => Some(load_target_stats(&dir)?),
    };
    let stats = stats.as_deref();
    let y = scale(&truth, stats)?;
    let tag = &cfg.eval.dataset_tag;
    let metric = |name: &str, rows: &[Array1<f64>]| -> Result<MetricsReport, CliError> {
        let yhat = scale(rows, stats)?;
        MetricsReport::compute(tag, name, &y, &yhat).map_err(|e| CliError::Validation(e.to_string()))
    };
    Ok(vec![metric("dhnn", &preds)?, metric("persistence", &baseline)?])
}

/// `evaluate`: write `metrics.txt` for the test split.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<String, CliError> {
    let started = Instant::now();
    let reports = evaluate_reports(cfg)?;
    let mut text = format!("{METRICS_HEADER}\n");
    for r in &reports {
        writeln!(text, "{r}").unwrap();
    }
    let dir = cfg.output_dir();
    let _lock = DirLock::acquire(&dir)?;
    write_file(&dir.join(METRICS_FILE), text.as_bytes())?;
    log_line(&dir, "evaluate", started, &format!("metrics_on={}", cfg.eval.metrics_on))?;
    Ok(text.trim_end().to_string())
}

/// Every stage in order.
pub fn cmd_run(cfg: &RunConfig) -> Result<String, CliError> {
    let mut out = Vec::new();
    out.push(cmd_ingest(cfg)?);
    out.push(cmd_build(cfg)?);
    out.push(cmd_train(cfg)?);
    out.push(cmd_evaluate(cfg)?);
    Ok(out.join("\n"))
}

/// Byte range of the `index`-th record of an archive.
fn record_span(text: &str, index: usize) -> Option<(usize, usize)> {
    let mut starts = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.starts_with("SNAPSHOT") {
            starts.push(offset);
        }
        offset += line.len();
    }
    let start = *starts.get(index)?;
    let end = starts.get(index + 1).copied().unwrap_or(text.len());
    Some((start, end))
}

/// `inspect`: print one record exactly as stored, then a summary.
pub fn cmd_inspect(path: &Path, index: usize) -> Result<String, CliError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Validation(format!("{} is not UTF-8", path.display())))?;
    let (start, end) = record_span(&text, index).ok_or_else(|| {
        CliError::Usage(format!("{} has no snapshot with index {index}", path.display()))
    })?;
    let record = &text[start..end];
    let snap = HypergraphSnapshot::deserialize(record)
        .map_err(|e| CliError::Validation(format!("record {index}: {e}")))?;
    let com = snap.hyperedges.iter().filter(|e| e.source == EdgeSource::Com).count();
    let (lo, hi) = snap
        .weights
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    let mut out = record.to_string();
    if !out.ends_with('\n') {
        out.push('\n');
    }
    writeln!(
        out,
        "# window_end {}: {} nodes, {} hyperedges ({com} COM, {} ATT), weights in [{lo}, {hi}]",
        snap.window_end,
        snap.n_nodes,
        snap.n_edges(),
        snap.n_edges() - com
    )
    .unwrap();
    for (v, d) in snap.vertex_degrees.iter().enumerate() {
        writeln!(out, "# node {v}: degree {d}").unwrap();
    }
    Ok(out)
}

/// `synth`: write a planted-community CSV and its labels next to it.
pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<String, CliError> {
    let data = generate_synthetic(spec).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_file(out, table_csv(&data.table).as_bytes())?;
    let labels = labels_path(out);
    write_file(&labels, labels_text(&data).as_bytes())?;
    Ok(format!(
        "wrote {} rows × {} series to {} and labels to {}",
        data.table.len(),
        data.table.n_series(),
        out.display(),
        labels.display()
    ))
}

pub fn labels_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    csv.with_file_name(format!("{stem}_labels.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_spans() {
        let text = "SNAPSHOT window_end=1 nodes=1\nCOM 0.000001 0\nSNAPSHOT window_end=2 nodes=1\nATT 1 0\n";
        assert_eq!(record_span(text, 0), Some((0, 45)));
        assert_eq!(&text[45..], "SNAPSHOT window_end=2 nodes=1\nATT 1 0\n");
        assert_eq!(record_span(text, 1), Some((45, text.len())));
        assert_eq!(record_span(text, 2), None);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(CliError::Locked(_))));
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn exit_codes_are_distinct() {
        let errs = [
            CliError::Usage(String::new()),
            CliError::MissingInput(PathBuf::new()),
            CliError::Validation(String::new()),
            CliError::Numeric(String::new()),
            CliError::Io {
                path: PathBuf::new(),
                source: std::io::Error::other("x"),
            },
            CliError::Locked(PathBuf::new()),
        ];
        let mut codes: Vec<i32> = errs.iter().map(CliError::exit_code).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), errs.len());
        assert!(!codes.contains(&0) && !codes.contains(&1));
    }

    #[test]
    fn labels_sit_next_to_csv() {
        assert_eq!(labels_path(Path::new("/a/b/syn.csv")), PathBuf::from("/a/b/syn_labels.csv"));
    }
}
