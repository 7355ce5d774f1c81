//! Dynamic hypergraph forecasting for multivariate time series.
//!
//! The crate is organised as a pipeline:
//!
//! - [`ingest`]: CSV loading, forward-fill imputation, log returns, rolling
//!   normalisation, windowing and chronological splits.
//! - [`spectral`]: Pearson correlation and the random-matrix decomposition of
//!   a correlation matrix into noise, market and structural parts.
//! - [`community`]: modularity matrices and Louvain-style optimisation.
//! - [`hypergraph`]: per-window hypergraph snapshots built from partitions.
//! - [`neural`]: a small reverse-mode differentiation tape with the layers the
//!   model needs (GRU, LSTM, multi-head attention, hypergraph convolution,
//!   MLP) and the Adam optimiser.
//! - [`dhnn`]: the full model, snapshot construction and the training loop.
//! - [`eval`]: forecast metrics and the persistence baseline.
//! - [`synthetic`]: a planted-community data generator used by tests and the
//!   CLI.

pub mod community;
pub mod dhnn;
pub mod eval;
pub mod hypergraph;
pub mod ingest;
pub mod linalg;
pub mod neural;
pub mod spectral;
pub mod synthetic;

pub use community::{ModularityKind, ModularityMatrix, Partition};
pub use dhnn::{DhnnModel, ModelConfig, TrainReport};
pub use eval::MetricsReport;
pub use hypergraph::{EdgeSource, Hyperedge, HypergraphSnapshot};
pub use ingest::{SeriesTable, WindowSample};
pub use spectral::{CorrelationMatrix, RmtDecomposition};
