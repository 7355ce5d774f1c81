//! Correlation matrices and their random-matrix filtering.
//!
//! Eigenvalues inside the Marchenko–Pastur support `[λ−, λ+]` are treated as
//! noise. The largest eigenpair is the market mode and everything else above
//! `λ+` is the structural component used for community detection.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

use crate::linalg::symmetric_eigen;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("need at least 2 observations and 2 series, got {rows} × {cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("ratio Q = T/N = {0} must exceed 1")]
    BadRatio(f64),
    #[error("variance estimate {0} must be positive")]
    BadVariance(f64),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix must be square, got {0} × {1}")]
    NotSquare(usize, usize),
}

/// Pearson correlation of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub entries: Array2<f64>,
    pub window_end: usize,
    pub window_len: usize,
}

impl CorrelationMatrix {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }
}

/// Column-wise Pearson correlation of an `m × N` window.
///
/// Zero-variance columns correlate 0 with everything else and 1 with
/// themselves.
pub fn pearson_correlation(window: ArrayView2<'_, f64>) -> Result<Array2<f64>, SpectralError> {
    let (m, n) = window.dim();
    if m < 2 || n < 2 {
        return Err(SpectralError::TooSmall { rows: m, cols: n });
    }
    let mut centered = window.to_owned();
    let mut norms = vec![0.0; n];
    for (c, mut col) in centered.columns_mut().into_iter().enumerate() {
        let mean = col.sum() / m as f64;
        col.mapv_inplace(|x| x - mean);
        norms[c] = col.dot(&col).sqrt();
    }
    let mut out = Array2::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            let r = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let r = centered.column(i).dot(&centered.column(j)) / (norms[i] * norms[j]);
                r.clamp(-1.0, 1.0)
            };
            out[[i, j]] = r;
            out[[j, i]] = r;
        }
    }
    Ok(out)
}

/// [`pearson_correlation`] tagged with its window position.
pub fn window_correlation(
    window: ArrayView2<'_, f64>,
    window_end: usize,
) -> Result<CorrelationMatrix, SpectralError> {
    Ok(CorrelationMatrix {
        entries: pearson_correlation(window)?,
        window_end,
        window_len: window.nrows(),
    })
}

/// Marchenko–Pastur support `σ²(1 ± √(1/Q))²`.
pub fn mp_bounds(q_ratio: f64, sigma2: f64) -> Result<(f64, f64), SpectralError> {
    if !(q_ratio > 1.0) {
        return Err(SpectralError::BadRatio(q_ratio));
    }
    if !(sigma2 > 0.0) {
        return Err(SpectralError::BadVariance(sigma2));
    }
    let r = (1.0 / q_ratio).sqrt();
    Ok((sigma2 * (1.0 - r).powi(2), sigma2 * (1.0 + r).powi(2)))
}

/// Split of a correlation matrix into noise, market and structural parts.
#[derive(Debug, Clone)]
pub struct RmtDecomposition {
    pub noise_part: Array2<f64>,
    pub market_part: Array2<f64>,
    pub structural_part: Array2<f64>,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub q_ratio: f64,
    pub sigma2: f64,
    /// Descending.
    pub eigenvalues: Array1<f64>,
    /// Eigenvectors as columns, aligned with `eigenvalues`.
    pub eigenvectors: Array2<f64>,
    /// How many eigenvalues tie with the top one.
    pub top_multiplicity: usize,
    pub structural_indices: Vec<usize>,
}

impl RmtDecomposition {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// One line of the spectrum debug dump.
    pub fn dump_line(&self, window_end: usize) -> String {
        let mut ev = String::new();
        for (i, v) in self.eigenvalues.iter().enumerate() {
            if i > 0 {
                ev.push(' ');
            }
            write!(ev, "{v}").unwrap();
        }
        format!(
            "{window_end}, [{ev}], {}, {}, {}, {}",
            self.lambda_minus, self.lambda_plus, self.sigma2, self.top_multiplicity
        )
    }
}

/// Header for a file of [`RmtDecomposition::dump_line`] records.
pub const SPECTRUM_DUMP_HEADER: &str =
    "window_end, eigenvalues[], lambda_minus, lambda_plus, sigma2, top_multiplicity";

fn max_asymmetry(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Filter a correlation matrix estimated from `window_len` observations.
///
/// `σ² = 1 − λ_max/N`; eigenvalues `≤ λ+` are noise, the top eigenpair is
/// the market mode, and the remaining eigenvalues above `λ+` form the
/// structural part. Eigenvalues that tie exactly with the top one go to the
/// structural part so the three pieces always sum back to `corr`.
pub fn rmt_decompose(corr: &Array2<f64>, window_len: usize) -> Result<RmtDecomposition, SpectralError> {
    let (n, nc) = corr.dim();
    if n != nc {
        return Err(SpectralError::NotSquare(n, nc));
    }
    if n < 2 {
        return Err(SpectralError::TooSmall { rows: window_len, cols: n });
    }
    let asym = max_asymmetry(corr);
    if asym > 1e-10 {
        return Err(SpectralError::NotSymmetric(asym));
    }
    let q_ratio = window_len as f64 / n as f64;
    if !(q_ratio > 1.0) {
        return Err(SpectralError::BadRatio(q_ratio));
    }
    let eig = symmetric_eigen(corr);
    let lambda_max = eig.values[0];
    let sigma2 = 1.0 - lambda_max / n as f64;
    // A single mode carrying all the variance (λ_max = N) leaves no room for
    // noise or structure: everything below the top eigenpair is noise.
    let (lambda_minus, lambda_plus, has_structure) = if sigma2 > 0.0 {
        let (lo, hi) = mp_bounds(q_ratio, sigma2)?;
        (lo, hi, true)
    } else {
        (0.0, 0.0, false)
    };

    let top_multiplicity = eig.values.iter().filter(|&&v| v == lambda_max).count();
    let is_structural = |i: usize| has_structure && eig.values[i] > lambda_plus;
    let structural_indices: Vec<usize> = (1..n).filter(|&i| is_structural(i)).collect();
    let noise_indices: Vec<usize> = (1..n).filter(|&i| !is_structural(i)).collect();

    Ok(RmtDecomposition {
        noise_part: eig.partial_sum(noise_indices),
        market_part: eig.partial_sum([0]),
        structural_part: eig.partial_sum(structural_indices.iter().copied()),
        lambda_minus,
        lambda_plus,
        q_ratio,
        sigma2,
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
        top_multiplicity,
        structural_indices,
    })
}
