//! Planted-community multivariate series.
//!
//! Every community follows its own unit-variance AR(1) factor. All series
//! also load on a shared AR(1) market factor, so the top correlation mode is
//! the market and the communities show up beneath it. The first column of
//! community 0 is the forecasting target: a noisy average of the other
//! members of that community.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ingest::{IngestError, SeriesTable};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_communities: usize,
    pub per_community: usize,
    pub length: usize,
    /// Standard deviation of the idiosyncratic noise.
    pub noise: f64,
    pub seed: u64,
    /// AR(1) coefficient of every factor.
    pub phi: f64,
    /// Loading of every series on the market factor.
    pub market_loading: f64,
}

impl SyntheticSpec {
    pub fn new(n_communities: usize, per_community: usize, length: usize, noise: f64, seed: u64) -> Self {
        Self {
            n_communities,
            per_community,
            length,
            noise,
            seed,
            phi: 0.5,
            market_loading: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub table: SeriesTable,
    /// Planted community of every column.
    pub labels: Vec<usize>,
}

fn ar1_path(len: usize, phi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut x: f64 = rng.sample(StandardNormal);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(x);
        let e: f64 = rng.sample(StandardNormal);
        x = phi * x + innov * e;
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, IngestError> {
    if spec.n_communities == 0 || spec.per_community == 0 {
        return Err(IngestError::InvalidParameter(
            "need at least one community with one series".into(),
        ));
    }
    if spec.length < 2 {
        return Err(IngestError::TooShort {
            required: 2,
            actual: spec.length,
        });
    }
    if !(spec.noise >= 0.0) || !(spec.phi.abs() < 1.0) || !spec.market_loading.is_finite() {
        return Err(IngestError::InvalidParameter(format!(
            "noise {} must be ≥ 0 and |phi| {} < 1",
            spec.noise, spec.phi
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let market = ar1_path(spec.length, spec.phi, &mut rng);
    let factors: Vec<Vec<f64>> = (0..spec.n_communities)
        .map(|_| ar1_path(spec.length, spec.phi, &mut rng))
        .collect();

    let per = spec.per_community;
    let n_members = spec.n_communities * per;
    let mut values = Array2::zeros((spec.length, n_members));
    let mut names = Vec::with_capacity(n_members);
    let mut labels = Vec::with_capacity(n_members);
    for k in 0..spec.n_communities {
        for j in 0..per {
            names.push(if k == 0 && j == 0 {
                "target".to_string()
            } else {
                format!("c{k}_s{j}")
            });
            labels.push(k);
        }
    }

    for t in 0..spec.length {
        let common = spec.market_loading * market[t];
        for k in 0..spec.n_communities {
            for j in 0..per {
                let e: f64 = rng.sample(StandardNormal);
                values[[t, k * per + j]] = common + factors[k][t] + spec.noise * e;
            }
        }
        if per > 1 {
            let avg = (1..per).map(|j| values[[t, j]]).sum::<f64>() / (per - 1) as f64;
            let e: f64 = rng.sample(StandardNormal);
            values[[t, 0]] = avg + spec.noise * e;
        }
    }
    let table = SeriesTable::new(names, values, 0)?.with_note("synthetic");
    Ok(SyntheticData { table, labels })
}

/// Render planted labels as `series, community` lines.
pub fn labels_text(data: &SyntheticData) -> String {
    let mut out = String::from("series, community\n");
    for (name, label) in data.table.names.iter().zip(&data.labels) {
        out.push_str(&format!("{name}, {label}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::pearson_correlation;

    #[test]
    fn shape_and_labels() {
        let d = generate_synthetic(&SyntheticSpec::new(3, 4, 50, 0.1, 1)).unwrap();
        assert_eq!(d.table.values.dim(), (50, 12));
        assert_eq!(d.labels, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(d.table.target_name(), "target");
        assert_eq!(d.table.target_index, 0);
    }

    #[test]
    fn zero_noise_members_are_identical() {
        let d = generate_synthetic(&SyntheticSpec::new(2, 3, 200, 0.0, 5)).unwrap();
        let c = pearson_correlation(d.table.values.view()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[[i, j]] - 1.0).abs() < 1e-12);
                assert!((c[[3 + i, 3 + j]] - 1.0).abs() < 1e-12);
            }
        }
        assert!(c[[0, 3]] < 0.9);
    }

    #[test]
    fn seeded() {
        let s = SyntheticSpec::new(2, 2, 30, 0.2, 9);
        assert_eq!(generate_synthetic(&s).unwrap().table, generate_synthetic(&s).unwrap().table);
    }

    #[test]
    fn rejects_bad_counts() {
        assert!(generate_synthetic(&SyntheticSpec::new(0, 2, 30, 0.1, 1)).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(2, 2, 1, 0.1, 1)).is_err());
    }
}
