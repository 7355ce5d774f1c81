//! Loading and preparing multivariate series for windowed supervision.
//!
//! The pipeline is `load_csv` → optional `log_returns` → `rolling_normalize`
//! → `make_windows` → `chronological_split`. Every step is a pure function of
//! its input.

use std::path::Path;

use ndarray::{s, Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("target column `{0}` not found among numeric columns")]
    MissingTarget(String),
    #[error("column `{0}` has no valid values")]
    EmptyColumn(String),
    #[error("no numeric columns in input")]
    NoNumericColumns,
    #[error("need at least {required} rows, got {actual}")]
    TooShort { required: usize, actual: usize },
    #[error("non-positive value {value} at row {row}, column `{column}`")]
    NonPositive {
        row: usize,
        column: String,
        value: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Named multivariate series, one row per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub names: Vec<String>,
    /// `T × N_s`, row = timestamp.
    pub values: Array2<f64>,
    pub target_index: usize,
    pub frequency_note: String,
}

impl SeriesTable {
    pub fn new(
        names: Vec<String>,
        values: Array2<f64>,
        target_index: usize,
    ) -> Result<Self, IngestError> {
        if names.len() != values.ncols() {
            return Err(IngestError::InvalidParameter(format!(
                "{} names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        if target_index >= names.len() {
            return Err(IngestError::InvalidParameter(format!(
                "target index {target_index} out of range for {} series",
                names.len()
            )));
        }
        if values.nrows() < 2 {
            return Err(IngestError::TooShort {
                required: 2,
                actual: values.nrows(),
            });
        }
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(IngestError::InvalidParameter(format!(
                "non-finite value {v} at row {r}, column `{}`",
                names[c]
            )));
        }
        Ok(Self {
            names,
            values,
            target_index,
            frequency_note: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_series(&self) -> usize {
        self.values.ncols()
    }

    pub fn target_name(&self) -> &str {
        &self.names[self.target_index]
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.frequency_note = note.into();
        self
    }
}

/// One supervised example: the trailing `m` rows and the next `q` target values.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `m × N_s` rows `t-m+1 ..= t`.
    pub features: Array2<f64>,
    /// Target column at `t+1 ..= t+q`.
    pub target: Array1<f64>,
    pub window_end: usize,
}

/// How to read a CSV file.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub target_column: String,
    pub delimiter: u8,
    pub has_header: bool,
}

impl CsvSchema {
    pub fn new(target_column: impl Into<String>) -> Self {
        Self {
            target_column: target_column.into(),
            delimiter: b',',
            has_header: true,
        }
    }
}

fn parse_cell(cell: &str) -> Option<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Some(None);
    }
    cell.parse::<f64>().ok().map(Some)
}

/// Read a CSV file, dropping non-numeric columns and forward-filling gaps.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SeriesTable, IngestError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema).map(|t| t.with_note(format!("loaded from {}", path.display())))
}

/// [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<SeriesTable, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(schema.has_header)
        .flexible(false)
        .from_reader(reader);

    let mut header: Vec<String> = if schema.has_header {
        rdr.headers()?.iter().map(|h| h.trim().to_string()).collect()
    } else {
        Vec::new()
    };

    let mut columns: Vec<Vec<Option<f64>>> = Vec::new();
    let mut numeric: Vec<bool> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if columns.is_empty() {
            columns = vec![Vec::new(); record.len()];
            numeric = vec![true; record.len()];
            if header.is_empty() {
                header = (0..record.len()).map(|i| format!("col{i}")).collect();
            }
        }
        for (i, cell) in record.iter().enumerate() {
            match parse_cell(cell) {
                Some(v) => columns[i].push(v),
                None => {
                    numeric[i] = false;
                    columns[i].push(None);
                }
            }
        }
    }

    let kept: Vec<usize> = (0..columns.len()).filter(|&i| numeric[i]).collect();
    if kept.is_empty() {
        return Err(IngestError::NoNumericColumns);
    }
    let names: Vec<String> = kept.iter().map(|&i| header[i].clone()).collect();
    let target_index = names
        .iter()
        .position(|n| *n == schema.target_column)
        .ok_or_else(|| IngestError::MissingTarget(schema.target_column.clone()))?;

    let mut filled = Vec::with_capacity(kept.len());
    for (&i, name) in kept.iter().zip(&names) {
        let col = &columns[i];
        if col.iter().all(Option::is_none) {
            return Err(IngestError::EmptyColumn(name.clone()));
        }
        filled.push(forward_fill(col));
    }
    // Rows before every column has seen a value cannot be imputed.
    let start = filled
        .iter()
        .map(|c| c.iter().position(|v| !v.is_nan()).unwrap_or(0))
        .max()
        .unwrap_or(0);
    let rows = columns[0].len() - start;
    if rows < 2 {
        return Err(IngestError::TooShort {
            required: 2,
            actual: rows,
        });
    }
    let values = Array2::from_shape_fn((rows, names.len()), |(r, c)| filled[c][start + r]);
    SeriesTable::new(names, values, target_index)
}

/// Replace each gap with the most recent prior value; leading gaps stay NaN.
pub fn forward_fill(column: &[Option<f64>]) -> Vec<f64> {
    let mut last = f64::NAN;
    column
        .iter()
        .map(|v| {
            if let Some(x) = v {
                last = *x;
            }
            last
        })
        .collect()
}

/// `r_t = ln x_t - ln x_{t-1}`; the output has one row fewer.
pub fn log_returns(table: &SeriesTable) -> Result<SeriesTable, IngestError> {
    if let Some(((row, col), &value)) = table.values.indexed_iter().find(|(_, v)| **v <= 0.0) {
        return Err(IngestError::NonPositive {
            row,
            column: table.names[col].clone(),
            value,
        });
    }
    if table.len() < 3 {
        return Err(IngestError::TooShort {
            required: 3,
            actual: table.len(),
        });
    }
    let logs = table.values.mapv(f64::ln);
    let diff = &logs.slice(s![1.., ..]) - &logs.slice(s![..-1, ..]);
    Ok(SeriesTable {
        names: table.names.clone(),
        values: diff,
        target_index: table.target_index,
        frequency_note: table.frequency_note.clone(),
    })
}

/// Trailing-window statistics kept alongside a normalised table.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingStats {
    /// Window length used.
    pub window: usize,
    /// `(T - w + 1) × N_s` means aligned with the normalised rows.
    pub mean: Array2<f64>,
    /// Population standard deviations, same shape as `mean`.
    pub std: Array2<f64>,
}

impl RollingStats {
    /// Map a normalised value at `(row, col)` back to the original scale.
    pub fn denormalize(&self, row: usize, col: usize, value: f64) -> f64 {
        value * self.std[[row, col]] + self.mean[[row, col]]
    }
}

/// Rolling z-score over a trailing window of `w` rows (population std).
pub fn rolling_normalize(table: &SeriesTable, w: usize) -> Result<SeriesTable, IngestError> {
    rolling_normalize_with_stats(table, w).map(|(t, _)| t)
}

/// [`rolling_normalize`], also returning the per-cell statistics.
pub fn rolling_normalize_with_stats(
    table: &SeriesTable,
    w: usize,
) -> Result<(SeriesTable, RollingStats), IngestError> {
    if w < 2 {
        return Err(IngestError::InvalidParameter(format!(
            "normalisation window must be at least 2, got {w}"
        )));
    }
    let t = table.len();
    if w > t {
        return Err(IngestError::TooShort {
            required: w,
            actual: t,
        });
    }
    let n = table.n_series();
    let rows = t - w + 1;
    let mut out = Array2::zeros((rows, n));
    let mut mean = Array2::zeros((rows, n));
    let mut std = Array2::zeros((rows, n));
    for c in 0..n {
        let col = table.values.column(c);
        for r in 0..rows {
            let win = col.slice(s![r..r + w]);
            let (lo, hi) = win
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                });
            let mu = win.sum() / w as f64;
            let x = col[r + w - 1];
            mean[[r, c]] = mu;
            if lo == hi {
                // Flat window: sigma is exactly zero.
                mean[[r, c]] = x;
                continue;
            }
            let var = win.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let sd = var.sqrt();
            std[[r, c]] = sd;
            out[[r, c]] = (x - mu) / sd;
        }
    }
    let normalized = SeriesTable {
        names: table.names.clone(),
        values: out,
        target_index: table.target_index,
        frequency_note: table.frequency_note.clone(),
    };
    Ok((
        normalized,
        RollingStats {
            window: w,
            mean,
            std,
        },
    ))
}

/// Number of hypergraph snapshots a length-`t` series yields for window `m`.
pub fn snapshot_count(t: usize, m: usize) -> usize {
    (t + 1).saturating_sub(m)
}

/// Slide a length-`m` window over the table with a `q`-step target.
///
/// Emits `T - m - q + 1` samples ordered by `window_end`.
pub fn make_windows(table: &SeriesTable, m: usize, q: usize) -> Result<Vec<WindowSample>, IngestError> {
    if m < 2 || q < 1 {
        return Err(IngestError::InvalidParameter(format!(
            "window m={m} must be >= 2 and horizon q={q} >= 1"
        )));
    }
    let t = table.len();
    if t < m + q {
        return Err(IngestError::TooShort {
            required: m + q,
            actual: t,
        });
    }
    let target = table.values.column(table.target_index);
    Ok((m - 1..t - q)
        .map(|end| WindowSample {
            features: table.values.slice(s![end + 1 - m..=end, ..]).to_owned(),
            target: target.slice(s![end + 1..=end + q]).to_owned(),
            window_end: end,
        })
        .collect())
}

/// Split sizes for `n` items: floor for validation and test (at least one
/// each), remainder to training.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize), IngestError> {
    let (a, b, c) = ratios;
    if (a + b + c - 1.0).abs() > 1e-9 || a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(IngestError::InvalidParameter(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    if n < 3 {
        return Err(IngestError::TooShort {
            required: 3,
            actual: n,
        });
    }
    let val = ((n as f64 * b).floor() as usize).max(1);
    let test = ((n as f64 * c).floor() as usize).max(1);
    if val + test >= n {
        return Err(IngestError::TooShort {
            required: val + test + 1,
            actual: n,
        });
    }
    Ok((n - val - test, val, test))
}

/// Contiguous chronological train/validation/test slices.
pub fn chronological_split<T: Clone>(
    samples: &[T],
    ratios: (f64, f64, f64),
) -> Result<(Vec<T>, Vec<T>, Vec<T>), IngestError> {
    let (train, val, _) = split_sizes(samples.len(), ratios)?;
    Ok((
        samples[..train].to_vec(),
        samples[train..train + val].to_vec(),
        samples[train + val..].to_vec(),
    ))
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.15, 0.15);

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn table(values: Array2<f64>) -> SeriesTable {
        let names = (0..values.ncols()).map(|i| format!("s{i}")).collect();
        SeriesTable::new(names, values, 0).unwrap()
    }

    #[test]
    fn forward_fill_gap() {
        assert_eq!(forward_fill(&[Some(1.0), None, Some(3.0)]), vec![1.0, 1.0, 3.0]);
        assert_eq!(forward_fill(&[Some(1.0), Some(2.0)]), vec![1.0, 2.0]);
    }

    #[test]
    fn csv_trims_leading_gaps_and_drops_categorical() {
        let data = "date,a,b\nx,NaN,1\ny,2,\nz,3,4\n";
        let t = read_csv(data.as_bytes(), &CsvSchema::new("b")).unwrap();
        assert_eq!(t.names, vec!["a", "b"]);
        assert_eq!(t.target_index, 1);
        assert_eq!(t.values, array![[2.0, 1.0], [3.0, 4.0]]);
    }

    #[test]
    fn csv_errors() {
        let data = "a,b\n1,\n2,\n";
        assert!(matches!(
            read_csv(data.as_bytes(), &CsvSchema::new("a")),
            Err(IngestError::EmptyColumn(c)) if c == "b"
        ));
        let data = "a,b\n1,2\n2,3\n";
        assert!(matches!(
            read_csv(data.as_bytes(), &CsvSchema::new("zz")),
            Err(IngestError::MissingTarget(_))
        ));
        assert!(matches!(
            load_csv("/definitely/not/here.csv", &CsvSchema::new("a")),
            Err(IngestError::Io { .. })
        ));
    }

    #[test]
    fn csv_custom_delimiter_without_header() {
        let schema = CsvSchema {
            target_column: "col1".into(),
            delimiter: b';',
            has_header: false,
        };
        let t = read_csv("1;2\n3;4\n".as_bytes(), &schema).unwrap();
        assert_eq!(t.target_index, 1);
        assert_eq!(t.values, array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn log_return_cases() {
        let e = std::f64::consts::E;
        let t = table(array![[1.0], [e], [e]]);
        let r = log_returns(&t).unwrap();
        assert!((r.values[[0, 0]] - 1.0).abs() < 1e-15);
        assert_eq!(r.values[[1, 0]], 0.0);

        let t = table(array![[2.0, 5.0], [4.0, 5.0], [4.0, 5.0]]);
        let r = log_returns(&t).unwrap();
        assert!((r.values[[0, 0]] - 0.693_147_180_559_945_3).abs() < 1e-15);
        assert!(r.values.column(1).iter().all(|&v| v == 0.0));

        let bad = table(array![[1.0], [0.0], [2.0]]);
        assert!(matches!(
            log_returns(&bad),
            Err(IngestError::NonPositive { row: 1, .. })
        ));
    }

    #[test]
    fn rolling_normalize_hand_case() {
        let t = table(array![[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]]);
        let (n, stats) = rolling_normalize_with_stats(&t, 2).unwrap();
        assert_eq!(n.len(), 2);
        // window [1, 2]: mean 1.5, population std 0.5
        assert_eq!(stats.mean[[0, 0]], 1.5);
        assert_eq!(stats.std[[0, 0]], 0.5);
        assert_eq!(n.values[[0, 0]], 1.0);
        assert!(n.values.column(1).iter().all(|&v| v == 0.0));
        assert_eq!(stats.denormalize(0, 0, n.values[[0, 0]]), 2.0);
        assert!(rolling_normalize(&t, 4).is_err());
        assert!(rolling_normalize(&t, 1).is_err());
    }

    #[test]
    fn flat_window_with_inexact_mean_is_zero() {
        let t = table(Array2::from_elem((5, 1), 0.1));
        let n = rolling_normalize(&t, 3).unwrap();
        assert!(n.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_counts() {
        let t = table(Array2::from_shape_fn((10, 2), |(r, c)| (r * 2 + c) as f64));
        let w = make_windows(&t, 4, 1).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(
            w.iter().map(|s| s.window_end).collect::<Vec<_>>(),
            (3..=8).collect::<Vec<_>>()
        );
        assert_eq!(w[0].features.row(0).to_vec(), vec![0.0, 1.0]);
        assert_eq!(w[0].target.to_vec(), vec![8.0]);
        assert_eq!(make_windows(&t, 7, 3).unwrap().len(), 1);
        assert!(make_windows(&t, 8, 3).is_err());
        assert_eq!(snapshot_count(10, 4), 7);
    }

    #[test]
    fn split_cases() {
        assert_eq!(split_sizes(100, DEFAULT_SPLIT).unwrap(), (70, 15, 15));
        assert_eq!(split_sizes(10, DEFAULT_SPLIT).unwrap(), (8, 1, 1));
        assert_eq!(split_sizes(3, DEFAULT_SPLIT).unwrap(), (1, 1, 1));
        assert!(split_sizes(2, DEFAULT_SPLIT).is_err());
        assert!(split_sizes(10, (0.5, 0.5, 0.5)).is_err());
        let xs: Vec<usize> = (0..10).collect();
        let (a, b, c) = chronological_split(&xs, DEFAULT_SPLIT).unwrap();
        assert_eq!(a, (0..8).collect::<Vec<_>>());
        assert_eq!(b, vec![8]);
        assert_eq!(c, vec![9]);
    }
}
