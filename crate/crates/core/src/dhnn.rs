//! The forecasting model: hyperedge generator, temporal layer, hypergraph
//! layer and MLP head, plus snapshot construction and training.
//!
//! Parameters live in one [`ParameterSet`] under four prefixes: `gen.`
//! (GRU and latent attention), `tm.` (temporal layer), `hg.` (hypergraph
//! convolutions) and `head.` (MLP).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::community::{
    build_modularity_configuration, build_modularity_plain, detect_communities, modularity_from_rmt,
    symmetrize_attention, CommunityError,
};
use crate::hypergraph::{
    assemble_snapshot, hyperedges_from_partition, EdgeSource, Hyperedge, HypergraphError, HypergraphSnapshot,
    WEIGHT_FLOOR,
};
use crate::ingest::WindowSample;
use crate::neural::{
    gru_forward, gru_param_shapes, hypergraph_conv, latent_attention, latent_attention_param_shapes, lstm_forward,
    lstm_param_shapes, mha_forward, mha_param_shapes, mlp_forward, mlp_param_shapes, mse_loss, read_checkpoint,
    write_checkpoint, Activation, Adam, Bindings, ConvStructure, Graph, NeuralError, ParamSpec, ParameterSet, Var,
};
use crate::spectral::{pearson_correlation, rmt_decompose, SpectralError};

#[derive(Debug, Error)]
pub enum DhnnError {
    #[error("window ending at {window_end}: {source}")]
    Spectral {
        window_end: usize,
        #[source]
        source: SpectralError,
    },
    #[error("window ending at {window_end}: {source}")]
    Community {
        window_end: usize,
        #[source]
        source: CommunityError,
    },
    #[error("window ending at {window_end}: {source}")]
    Hypergraph {
        window_end: usize,
        #[source]
        source: HypergraphError,
    },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("non-finite training loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Optimizer {
        epoch: usize,
        batch: usize,
        #[source]
        source: NeuralError,
    },
}

/// Null model used when partitioning the attention matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionNullModel {
    #[default]
    Configuration,
    None,
}

impl AttentionNullModel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Configuration => "configuration",
            Self::None => "none",
        }
    }
}

impl FromStr for AttentionNullModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "configuration" => Ok(Self::Configuration),
            "none" => Ok(Self::None),
            other => Err(format!("unknown null model {other:?} (configuration or none)")),
        }
    }
}

impl fmt::Display for AttentionNullModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub lr: f64,
    pub elu_alpha: f64,
    /// Depth of the first LSTM stack.
    pub n_temporal_layers: usize,
    pub temporal_units: usize,
    pub hgnn_units: usize,
    pub window_m: usize,
    pub n_heads: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub horizon_q: usize,
    pub gru_hidden: usize,
    pub seed: u64,
    /// Rebuild attention hyperedges every this many epochs; 0 keeps the
    /// generator frozen.
    pub refresh_every: usize,
    pub attention_null_model: AttentionNullModel,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            elu_alpha: 0.3,
            n_temporal_layers: 1,
            temporal_units: 8,
            hgnn_units: 16,
            window_m: 24,
            n_heads: 2,
            batch_size: 32,
            dropout: 0.1,
            horizon_q: 1,
            gru_hidden: 8,
            seed: 42,
            refresh_every: 0,
            attention_null_model: AttentionNullModel::Configuration,
            max_epochs: 100,
            patience: 10,
        }
    }
}

impl ModelConfig {
    pub fn stock() -> Self {
        Self {
            lr: 7.545e-6,
            elu_alpha: 0.3,
            n_temporal_layers: 1,
            temporal_units: 50,
            hgnn_units: 15,
            window_m: 200,
            n_heads: 6,
            batch_size: 32,
            dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn energy() -> Self {
        Self {
            lr: 5.815e-6,
            elu_alpha: 0.3,
            n_temporal_layers: 5,
            temporal_units: 15,
            hgnn_units: 25,
            window_m: 130,
            n_heads: 2,
            batch_size: 32,
            dropout: 0.4,
            ..Self::default()
        }
    }

    pub fn air() -> Self {
        Self {
            lr: 9.083e-5,
            elu_alpha: 0.3,
            n_temporal_layers: 5,
            temporal_units: 35,
            hgnn_units: 35,
            window_m: 100,
            n_heads: 4,
            batch_size: 32,
            dropout: 0.2,
            ..Self::default()
        }
    }

    /// Named preset: `stock`, `energy` or `air`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "stock" => Some(Self::stock()),
            "energy" => Some(Self::energy()),
            "air" => Some(Self::air()),
            _ => None,
        }
    }

    /// Width `d` of the attention block.
    pub fn model_width(&self) -> usize {
        self.temporal_units * self.n_heads
    }

    pub fn joint(&self) -> bool {
        self.refresh_every > 0
    }

    pub fn validate(&self, n_series: usize) -> Result<(), DhnnError> {
        let counts = [
            ("n_temporal_layers", self.n_temporal_layers),
            ("temporal_units", self.temporal_units),
            ("hgnn_units", self.hgnn_units),
            ("window_m", self.window_m),
            ("n_heads", self.n_heads),
            ("batch_size", self.batch_size),
            ("horizon_q", self.horizon_q),
            ("gru_hidden", self.gru_hidden),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(DhnnError::Config(format!("{name} must be at least 1")));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(DhnnError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DhnnError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.elu_alpha >= 0.0) || !self.elu_alpha.is_finite() {
            return Err(DhnnError::Config(format!("elu_alpha must be non-negative, got {}", self.elu_alpha)));
        }
        if n_series < 2 {
            return Err(DhnnError::Config(format!("need at least 2 series, got {n_series}")));
        }
        if self.window_m <= n_series {
            return Err(DhnnError::Config(format!(
                "window_m = {} must exceed the number of series {n_series}",
                self.window_m
            )));
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn render(&self) -> String {
        format!(
            "lr = {}\nelu_alpha = {}\nn_temporal_layers = {}\ntemporal_units = {}\nhgnn_units = {}\n\
             window_m = {}\nn_heads = {}\nbatch_size = {}\ndropout = {}\nhorizon_q = {}\ngru_hidden = {}\n\
             seed = {}\nrefresh_every = {}\nattention_null_model = {}\nmax_epochs = {}\npatience = {}\n",
            self.lr,
            self.elu_alpha,
            self.n_temporal_layers,
            self.temporal_units,
            self.hgnn_units,
            self.window_m,
            self.n_heads,
            self.batch_size,
            self.dropout,
            self.horizon_q,
            self.gru_hidden,
            self.seed,
            self.refresh_every,
            self.attention_null_model,
            self.max_epochs,
            self.patience
        )
    }

    /// Set one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value {value:?} for {key}"))
        }
        match key {
            "lr" => self.lr = parse(key, value)?,
            "elu_alpha" => self.elu_alpha = parse(key, value)?,
            "n_temporal_layers" => self.n_temporal_layers = parse(key, value)?,
            "temporal_units" => self.temporal_units = parse(key, value)?,
            "hgnn_units" => self.hgnn_units = parse(key, value)?,
            "window_m" => self.window_m = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "horizon_q" => self.horizon_q = parse(key, value)?,
            "gru_hidden" => self.gru_hidden = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "refresh_every" => self.refresh_every = parse(key, value)?,
            "attention_null_model" => self.attention_null_model = value.parse()?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            other => return Err(format!("unknown model key {other:?}")),
        }
        Ok(())
    }
}

/// Deterministic 64-bit mix of two values.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const COM_STREAM: u64 = 0xC0;
const ATT_STREAM: u64 = 0xA7;
const INIT_STREAM: u64 = 0x1;
const SHUFFLE_STREAM: u64 = 0x5;
const DROPOUT_STREAM: u64 = 0xD;

/// Whether a forward pass uses dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from `(seed, epoch, sample)`.
    Train { epoch: usize, sample: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DhnnModel {
    pub config: ModelConfig,
    pub n_series: usize,
    pub params: ParameterSet,
}

/// Every parameter of a model with the given configuration.
pub fn param_specs(config: &ModelConfig, n_series: usize) -> Result<Vec<ParamSpec>, DhnnError> {
    let n = n_series;
    let m = config.window_m;
    let h1 = config.temporal_units;
    let d = config.model_width();
    let h = config.hgnn_units;
    let mut specs = gru_param_shapes("gen.gru", n, config.gru_hidden);
    specs.extend(latent_attention_param_shapes("gen", config.gru_hidden, n));
    for l in 0..config.n_temporal_layers {
        let n_in = if l == 0 { n } else { h1 };
        specs.extend(lstm_param_shapes(&format!("tm.lstm1.{l}"), n_in, h1));
    }
    specs.extend(lstm_param_shapes("tm.lstm2", h1, d));
    specs.extend(mha_param_shapes("tm.mha", d, config.n_heads)?);
    specs.extend(lstm_param_shapes("tm.lstm3", d, d));
    specs.push(ParamSpec::weight("tm.fc.w", d, n));
    specs.push(ParamSpec::zero("tm.fc.b", 1, n));
    specs.push(ParamSpec::weight("hg.theta1", 2 * m, h));
    specs.push(ParamSpec::weight("hg.w1", h + m, h));
    specs.push(ParamSpec::weight("hg.theta2", h, m));
    specs.extend(mlp_param_shapes("head", &head_sizes(config, n)));
    Ok(specs)
}

fn head_sizes(config: &ModelConfig, n_series: usize) -> [usize; 3] {
    [3 * config.window_m * n_series, config.hgnn_units, config.horizon_q]
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

impl DhnnModel {
    /// Fresh model with seeded initial parameters.
    pub fn new(config: ModelConfig, n_series: usize) -> Result<Self, DhnnError> {
        config.validate(n_series)?;
        let specs = param_specs(&config, n_series)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, INIT_STREAM));
        let params = ParameterSet::from_specs(&specs, &mut rng);
        Ok(Self {
            config,
            n_series,
            params,
        })
    }

    /// Wrap existing parameters after checking them against the config.
    pub fn from_params(config: ModelConfig, n_series: usize, params: ParameterSet) -> Result<Self, DhnnError> {
        config.validate(n_series)?;
        params.check_specs(&param_specs(&config, n_series)?)?;
        Ok(Self {
            config,
            n_series,
            params,
        })
    }

    /// Parameters under one prefix (`gen`, `tm`, `hg` or `head`).
    pub fn section(&self, prefix: &str) -> ParameterSet {
        let mut out = ParameterSet::new();
        let dotted = format!("{prefix}.");
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with(&dotted)) {
            out.insert(name, t.clone());
        }
        out
    }

    pub fn checkpoint_header(&self) -> String {
        format!("n_series = {}\n{}", self.n_series, self.config.render())
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        write_checkpoint(&self.params, &self.checkpoint_header())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, DhnnError> {
        let (header, params) = read_checkpoint(bytes)?;
        let mut config = ModelConfig::default();
        let mut n_series = None;
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NeuralError::Checkpoint(format!("bad header line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "n_series" {
                n_series = Some(v.parse().map_err(|_| NeuralError::Checkpoint(format!("bad n_series {v:?}")))?);
            } else {
                config.set(k, v).map_err(NeuralError::Checkpoint)?;
            }
        }
        let n_series = n_series.ok_or_else(|| NeuralError::Checkpoint("header lacks n_series".into()))?;
        Self::from_params(config, n_series, params)
    }

    fn check_window(&self, x: &Array2<f64>) -> Result<(), DhnnError> {
        let expected = (self.config.window_m, self.n_series);
        if x.dim() != expected {
            return Err(DhnnError::Data(format!(
                "window has shape {:?}, expected {expected:?}",
                x.dim()
            )));
        }
        Ok(())
    }

    /// GRU states followed by latent attention; `N_s × N_s`, row-stochastic.
    pub fn attention_on(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<Var, NeuralError> {
        let z = gru_forward(g, b, "gen.gru", x, self.config.gru_hidden, None)?;
        latent_attention(g, b, "gen", z, self.n_series)
    }

    /// Attention matrix `A_t` of one window.
    pub fn attention(&self, x: &Array2<f64>) -> Result<Array2<f64>, DhnnError> {
        self.check_window(x)?;
        let mut g = Graph::new();
        let b = g.bind_with(&self.params, |_| false);
        let xv = g.constant(x.clone());
        let a = self.attention_on(&mut g, &b, xv)?;
        Ok(g.value(a).clone())
    }

    /// LSTM stack, second LSTM, attention, third LSTM and a per-step affine
    /// map back to `N_s` columns.
    pub fn temporal_layer(&self, g: &mut Graph, b: &Bindings, x: Var, mode: Mode) -> Result<Var, NeuralError> {
        let cfg = &self.config;
        let mut rng = match mode {
            Mode::Train { epoch, sample } if cfg.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(mix_seed(
                mix_seed(mix_seed(cfg.seed, DROPOUT_STREAM), epoch as u64),
                sample as u64,
            ))),
            _ => None,
        };
        let mut h = x;
        for l in 0..cfg.n_temporal_layers {
            h = lstm_forward(g, b, &format!("tm.lstm1.{l}"), h, cfg.temporal_units, None)?.hidden;
        }
        let d = cfg.model_width();
        h = lstm_forward(g, b, "tm.lstm2", h, d, None)?.hidden;
        if let Some(rng) = rng.as_mut() {
            let mask = g.constant(dropout_mask(rng, g.shape(h), cfg.dropout));
            h = g.mul(h, mask);
        }
        h = mha_forward(g, b, "tm.mha", h, cfg.n_heads)?.output;
        if let Some(rng) = rng.as_mut() {
            let mask = g.constant(dropout_mask(rng, g.shape(h), cfg.dropout));
            h = g.mul(h, mask);
        }
        h = lstm_forward(g, b, "tm.lstm3", h, d, None)?.hidden;
        let w = b.get("tm.fc.w").ok_or_else(|| NeuralError::MissingParam("tm.fc.w".into()))?;
        let bias = b.get("tm.fc.b").ok_or_else(|| NeuralError::MissingParam("tm.fc.b".into()))?;
        let expected = (d, self.n_series);
        for (name, v, shape) in [("tm.fc.w", w, expected), ("tm.fc.b", bias, (1, self.n_series))] {
            if g.shape(v) != shape {
                return Err(NeuralError::ParamShape {
                    name: name.into(),
                    expected: shape,
                    actual: g.shape(v),
                });
            }
        }
        let hw = g.matmul(h, w);
        Ok(g.add_row(hw, bias))
    }

    /// Two hypergraph convolutions over series-as-nodes, returned as `m × N_s`.
    pub fn hypergraph_layer(
        &self,
        g: &mut Graph,
        b: &Bindings,
        x: Var,
        tm: Var,
        structure: &ConvStructure,
        weights: Var,
    ) -> Result<Var, NeuralError> {
        let cfg = &self.config;
        if structure.n_nodes != g.shape(x).1 {
            return Err(NeuralError::InvalidArgument(format!(
                "snapshot has {} nodes but the window has {} series",
                structure.n_nodes,
                g.shape(x).1
            )));
        }
        let act = Activation::Elu(cfg.elu_alpha);
        let xt = g.transpose(x);
        let tmt = g.transpose(tm);
        let z0 = g.concat_cols(&[xt, tmt]);
        let z1 = hypergraph_conv(g, b, "hg.theta1", z0, structure, weights, cfg.hgnn_units, act)?;
        let zcat = g.concat_cols(&[z1, tmt]);
        let w1 = b.get("hg.w1").ok_or_else(|| NeuralError::MissingParam("hg.w1".into()))?;
        let expected = (cfg.hgnn_units + cfg.window_m, cfg.hgnn_units);
        if g.shape(w1) != expected {
            return Err(NeuralError::ParamShape {
                name: "hg.w1".into(),
                expected,
                actual: g.shape(w1),
            });
        }
        let zhat = g.matmul(zcat, w1);
        let out = hypergraph_conv(g, b, "hg.theta2", zhat, structure, weights, cfg.window_m, act)?;
        Ok(g.transpose(out))
    }

    /// Full forward pass; returns the `1 × q` prediction node.
    ///
    /// With the generator frozen the snapshot's stored weights are used; in
    /// joint mode they are recomputed on the tape from the current
    /// generator so gradients reach it.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        b: &Bindings,
        x: &Array2<f64>,
        snapshot: &HypergraphSnapshot,
        mode: Mode,
    ) -> Result<Var, DhnnError> {
        self.check_window(x)?;
        if snapshot.n_nodes != self.n_series {
            return Err(DhnnError::Data(format!(
                "snapshot has {} nodes, model expects {}",
                snapshot.n_nodes, self.n_series
            )));
        }
        let structure = ConvStructure::from_snapshot(snapshot);
        let xv = g.constant(x.clone());
        let weights = if self.config.joint() {
            let a = self.attention_on(g, b, xv)?;
            g.pair_abs_sum(a, &structure.members, WEIGHT_FLOOR)
        } else {
            let w = Array2::from_shape_vec((snapshot.weights.len(), 1), snapshot.weights.clone()).unwrap();
            g.constant(w)
        };
        let tm = self.temporal_layer(g, b, xv, mode)?;
        let hg = self.hypergraph_layer(g, b, xv, tm, &structure, weights)?;
        let cat = g.concat_cols(&[tm, hg, xv]);
        let flat = g.flatten(cat);
        let sizes = head_sizes(&self.config, self.n_series);
        Ok(mlp_forward(g, b, "head", flat, &sizes, Activation::Elu(self.config.elu_alpha))?)
    }

    fn bind(&self, g: &mut Graph) -> Bindings {
        let joint = self.config.joint();
        g.bind_with(&self.params, |name| joint || !name.starts_with("gen."))
    }

    /// Prediction in evaluation mode.
    pub fn predict(&self, x: &Array2<f64>, snapshot: &HypergraphSnapshot) -> Result<Array1<f64>, DhnnError> {
        let mut g = Graph::new();
        let b = g.bind_with(&self.params, |_| false);
        let out = self.forward_on(&mut g, &b, x, snapshot, Mode::Eval)?;
        Ok(g.value(out).row(0).to_owned())
    }

    /// Predictions for many samples, in parallel.
    pub fn predict_all(
        &self,
        samples: &[WindowSample],
        snapshots: &[HypergraphSnapshot],
    ) -> Result<Vec<Array1<f64>>, DhnnError> {
        check_pairing(samples, snapshots)?;
        samples
            .par_iter()
            .zip(snapshots.par_iter())
            .map(|(s, snap)| self.predict(&s.features, snap))
            .collect()
    }

    /// Loss of one sample and the gradients of every trainable parameter.
    pub fn loss_and_grads(
        &self,
        sample: &WindowSample,
        snapshot: &HypergraphSnapshot,
        mode: Mode,
    ) -> Result<(f64, BTreeMap<String, Array2<f64>>), DhnnError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let pred = self.forward_on(&mut g, &b, &sample.features, snapshot, mode)?;
        let target = target_row(sample, self.config.horizon_q)?;
        let t = g.constant(target);
        let loss = mse_loss(&mut g, pred, t)?;
        let value = g.scalar(loss);
        let grads = g.backward(loss).for_bindings(&b);
        Ok((value, grads))
    }

    /// Eval-mode MSE of one sample.
    pub fn loss(&self, sample: &WindowSample, snapshot: &HypergraphSnapshot) -> Result<f64, DhnnError> {
        let pred = self.predict(&sample.features, snapshot)?;
        let target = target_row(sample, self.config.horizon_q)?;
        Ok(pred
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / pred.len() as f64)
    }

    fn mean_loss(&self, samples: &[WindowSample], snapshots: &[HypergraphSnapshot]) -> Result<f64, DhnnError> {
        let losses: Vec<f64> = samples
            .par_iter()
            .zip(snapshots.par_iter())
            .map(|(s, snap)| self.loss(s, snap))
            .collect::<Result<_, _>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// COM hyperedges of one window from its RMT-filtered correlation.
    pub fn community_hyperedges(&self, sample: &WindowSample) -> Result<Vec<Hyperedge>, DhnnError> {
        community_hyperedges(&sample.features, sample.window_end, self.config.seed)
    }

    /// ATT hyperedges from an attention matrix.
    pub fn attention_hyperedges(&self, attention: &Array2<f64>, window_end: usize) -> Result<Vec<Hyperedge>, DhnnError> {
        let sym = symmetrize_attention(attention);
        let matrix = match self.config.attention_null_model {
            AttentionNullModel::Configuration => build_modularity_configuration(&sym),
            AttentionNullModel::None => build_modularity_plain(&sym),
        }
        .map_err(|source| DhnnError::Community { window_end, source })?;
        let seed = mix_seed(mix_seed(self.config.seed, ATT_STREAM), window_end as u64);
        let partition = detect_communities(&matrix, seed);
        Ok(hyperedges_from_partition(&partition, EdgeSource::Att))
    }

    /// Snapshot of one window.
    pub fn build_snapshot(&self, sample: &WindowSample) -> Result<HypergraphSnapshot, DhnnError> {
        let com = self.community_hyperedges(sample)?;
        self.snapshot_with_com(sample, com)
    }

    fn snapshot_with_com(&self, sample: &WindowSample, com: Vec<Hyperedge>) -> Result<HypergraphSnapshot, DhnnError> {
        let window_end = sample.window_end;
        let attention = self.attention(&sample.features)?;
        let att = self.attention_hyperedges(&attention, window_end)?;
        assemble_snapshot(com, att, &attention, self.n_series, window_end)
            .map_err(|source| DhnnError::Hypergraph { window_end, source })
    }

    /// Rebuild the ATT hyperedges and weights of a snapshot with the
    /// current generator, keeping its COM hyperedges.
    pub fn refresh_snapshot(
        &self,
        sample: &WindowSample,
        snapshot: &HypergraphSnapshot,
    ) -> Result<HypergraphSnapshot, DhnnError> {
        let com = snapshot
            .hyperedges
            .iter()
            .filter(|e| e.source == EdgeSource::Com)
            .cloned()
            .collect();
        self.snapshot_with_com(sample, com)
    }

    /// One snapshot per sample, built in parallel.
    pub fn build_snapshots(&self, samples: &[WindowSample]) -> Result<Vec<HypergraphSnapshot>, DhnnError> {
        samples.par_iter().map(|s| self.build_snapshot(s)).collect()
    }

    fn refresh_all(
        &self,
        samples: &[WindowSample],
        snapshots: &mut [HypergraphSnapshot],
    ) -> Result<(), DhnnError> {
        let fresh: Vec<HypergraphSnapshot> = samples
            .par_iter()
            .zip(snapshots.par_iter())
            .map(|(s, snap)| self.refresh_snapshot(s, snap))
            .collect::<Result<_, _>>()?;
        snapshots.clone_from_slice(&fresh);
        Ok(())
    }

    /// Minibatch Adam on MSE with early stopping; the best parameters by
    /// validation loss are restored at the end. In joint mode the attention
    /// hyperedges of both splits are rebuilt every `refresh_every` epochs
    /// and once more after the best parameters are restored.
    pub fn train(
        &mut self,
        train: &[WindowSample],
        train_snapshots: &mut [HypergraphSnapshot],
        val: &[WindowSample],
        val_snapshots: &mut [HypergraphSnapshot],
    ) -> Result<TrainReport, DhnnError> {
        let started = Instant::now();
        check_pairing(train, train_snapshots)?;
        check_pairing(val, val_snapshots)?;
        if train.is_empty() || val.is_empty() {
            return Err(DhnnError::Data("training and validation splits must be non-empty".into()));
        }
        let cfg = self.config.clone();
        cfg.validate(self.n_series)?;
        let mut adam = Adam::new(cfg.lr);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SHUFFLE_STREAM));
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epochs = Vec::new();
        let mut best = (f64::INFINITY, 0usize, self.params.clone());
        let mut since_best = 0;
        let mut stop_reason = StopReason::MaxEpochs;

        for epoch in 1..=cfg.max_epochs {
            if cfg.joint() && epoch > 1 && (epoch - 1) % cfg.refresh_every == 0 {
                self.refresh_all(train, train_snapshots)?;
                self.refresh_all(val, val_snapshots)?;
            }
            order.shuffle(&mut shuffle_rng);
            let mut total = 0.0;
            for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
                let model = &*self;
                let results: Vec<(f64, BTreeMap<String, Array2<f64>>)> = batch
                    .par_iter()
                    .map(|&i| model.loss_and_grads(&train[i], &train_snapshots[i], Mode::Train { epoch, sample: i }))
                    .collect::<Result<_, _>>()?;
                let mut sum: BTreeMap<String, Array2<f64>> = BTreeMap::new();
                let mut batch_loss = 0.0;
                for (loss, grads) in results {
                    batch_loss += loss;
                    for (name, g) in grads {
                        match sum.get_mut(&name) {
                            Some(acc) => *acc += &g,
                            None => {
                                sum.insert(name, g);
                            }
                        }
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(DhnnError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        loss: batch_loss,
                    });
                }
                total += batch_loss;
                let scale = 1.0 / batch.len() as f64;
                for g in sum.values_mut() {
                    *g *= scale;
                }
                adam.step(&mut self.params, &sum).map_err(|source| DhnnError::Optimizer {
                    epoch,
                    batch: batch_idx,
                    source,
                })?;
            }
            let train_loss = total / train.len() as f64;
            let val_loss = self.mean_loss(val, val_snapshots)?;
            if !val_loss.is_finite() {
                return Err(DhnnError::NonFiniteLoss {
                    epoch,
                    batch: 0,
                    loss: val_loss,
                });
            }
            epochs.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
            });
            if val_loss < best.0 {
                best = (val_loss, epoch, self.params.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stop_reason = StopReason::EarlyStop;
                    break;
                }
            }
        }
        let (best_val_loss, best_epoch, best_params) = best;
        self.params = best_params;
        if cfg.joint() {
            self.refresh_all(train, train_snapshots)?;
            self.refresh_all(val, val_snapshots)?;
        }
        Ok(TrainReport {
            epochs,
            best_epoch,
            best_val_loss,
            stop_reason,
            wall_time: started.elapsed(),
            seed: cfg.seed,
        })
    }
}

fn target_row(sample: &WindowSample, q: usize) -> Result<Array2<f64>, DhnnError> {
    if sample.target.len() != q {
        return Err(DhnnError::Data(format!(
            "sample ending at {} has {} targets, expected {q}",
            sample.window_end,
            sample.target.len()
        )));
    }
    Ok(sample.target.clone().insert_axis(ndarray::Axis(0)))
}

fn check_pairing(samples: &[WindowSample], snapshots: &[HypergraphSnapshot]) -> Result<(), DhnnError> {
    if samples.len() != snapshots.len() {
        return Err(DhnnError::Data(format!(
            "{} samples but {} snapshots",
            samples.len(),
            snapshots.len()
        )));
    }
    if let Some((s, snap)) = samples
        .iter()
        .zip(snapshots)
        .find(|(s, snap)| s.window_end != snap.window_end)
    {
        return Err(DhnnError::Data(format!(
            "sample ending at {} paired with snapshot ending at {}",
            s.window_end, snap.window_end
        )));
    }
    Ok(())
}

/// COM hyperedges of an `m × N` window: Pearson correlation, RMT
/// filtering and modularity optimisation on the structural part.
pub fn community_hyperedges(window: &Array2<f64>, window_end: usize, seed: u64) -> Result<Vec<Hyperedge>, DhnnError> {
    let corr = pearson_correlation(window.view()).map_err(|source| DhnnError::Spectral { window_end, source })?;
    let decomposition =
        rmt_decompose(&corr, window.nrows()).map_err(|source| DhnnError::Spectral { window_end, source })?;
    let matrix = modularity_from_rmt(&decomposition).map_err(|source| DhnnError::Community { window_end, source })?;
    let partition = detect_communities(&matrix, mix_seed(mix_seed(seed, COM_STREAM), window_end as u64));
    Ok(hyperedges_from_partition(&partition, EdgeSource::Com))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EarlyStop => "early_stop",
            Self::MaxEpochs => "max_epochs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub wall_time: Duration,
    pub seed: u64,
}

impl TrainReport {
    /// Per-epoch rows and a summary. Wall time is left out so the text is
    /// reproducible.
    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch, train_loss, val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{}, {}, {}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out.push_str(&format!(
            "# best_epoch = {}\n# best_val_loss = {}\n# stop_reason = {}\n# epochs_run = {}\n# seed = {}\n",
            self.best_epoch,
            self.best_val_loss,
            self.stop_reason.as_str(),
            self.epochs.len(),
            self.seed
        ));
        out
    }

    pub fn train_loss(&self, epoch: usize) -> Option<f64> {
        self.epochs.iter().find(|e| e.epoch == epoch).map(|e| e.train_loss)
    }
}
