//! Properties of the model, the training loop and the metrics.

use dhnn_core::dhnn::{DhnnModel, Mode, ModelConfig};
use dhnn_core::eval::{mae, mape, persistence_baseline, rmse, MetricsReport};
use dhnn_core::hypergraph::{Hyperedge, HypergraphSnapshot};
use dhnn_core::ingest::{chronological_split, make_windows, rolling_normalize, SeriesTable, WindowSample};
use dhnn_core::neural::{softmax_rows, Graph, Tensor};
use dhnn_core::synthetic::{generate_synthetic, SyntheticSpec};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        window_m: 10,
        gru_hidden: 3,
        temporal_units: 3,
        n_heads: 2,
        hgnn_units: 4,
        batch_size: 8,
        max_epochs: 6,
        patience: 2,
        lr: 3e-3,
        ..ModelConfig::default()
    }
}

fn samples(cfg: &ModelConfig, seed: u64) -> (SeriesTable, Vec<WindowSample>) {
    let data = generate_synthetic(&SyntheticSpec::new(2, 3, 140, 0.2, seed)).unwrap();
    let table = rolling_normalize(&data.table, cfg.window_m).unwrap();
    let samples = make_windows(&table, cfg.window_m, cfg.horizon_q).unwrap();
    (table, samples)
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = Array2::from_shape_fn((4, 7), |_| 30.0 * rand::Rng::random_range(&mut rng, -1.0..1.0));
        let s = softmax_rows(&a);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn forward_is_pure_and_dropout_free_train_equals_eval() {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..small_config()
    };
    let (_, samples) = samples(&cfg, 2);
    let model = DhnnModel::new(cfg, 6).unwrap();
    let s = &samples[20];
    let snap = model.build_snapshot(s).unwrap();
    let a = model.predict(&s.features, &snap).unwrap();
    let b = model.predict(&s.features, &snap).unwrap();
    assert_eq!(a, b);
    let mut g = Graph::new();
    let bind = g.bind(&model.params);
    let out = model
        .forward_on(&mut g, &bind, &s.features, &snap, Mode::Train { epoch: 4, sample: 20 })
        .unwrap();
    assert_eq!(g.value(out).row(0), a.view());
}

#[test]
fn early_stopping_reports_the_minimum() {
    let cfg = small_config();
    let (_, samples) = samples(&cfg, 3);
    let mut model = DhnnModel::new(cfg, 6).unwrap();
    let mut snaps = model.build_snapshots(&samples).unwrap();
    let (train, val, _) = chronological_split(&samples, (0.7, 0.15, 0.15)).unwrap();
    let (ts, rest) = snaps.split_at_mut(train.len());
    let vs = &mut rest[..val.len()];
    let report = model.train(&train, ts, &val, vs).unwrap();
    for e in &report.epochs {
        assert!(report.best_val_loss <= e.val_loss);
    }
    let best = report.epochs.iter().find(|e| e.epoch == report.best_epoch).unwrap();
    assert_eq!(best.val_loss, report.best_val_loss);
    // The restored parameters reproduce the best validation loss.
    let mut total = 0.0;
    for (s, snap) in val.iter().zip(vs.iter()) {
        total += model.loss(s, snap).unwrap();
    }
    assert!((total / val.len() as f64 - report.best_val_loss).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let cfg = small_config();
    let (_, samples) = samples(&cfg, 4);
    let model = DhnnModel::new(cfg, 6).unwrap();
    let back = DhnnModel::from_checkpoint(&model.to_checkpoint()).unwrap();
    assert_eq!(back.config, model.config);
    let s = &samples[5];
    let snap = model.build_snapshot(s).unwrap();
    assert_eq!(model.predict(&s.features, &snap).unwrap(), back.predict(&s.features, &snap).unwrap());
}

/// New column `k` holds old column `perm[k]`.
fn permute_cols(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(a.dim(), |(i, k)| a[[i, perm[k]]])
}

fn permute_rows(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(a.dim(), |(k, j)| a[[perm[k], j]])
}

#[test]
fn predictions_follow_series_permutation() {
    for joint in [false, true] {
        let cfg = ModelConfig {
            refresh_every: usize::from(joint),
            dropout: 0.0,
            ..small_config()
        };
        let n = 6;
        let m = cfg.window_m;
        let (_, samples) = samples(&cfg, 5);
        let model = DhnnModel::new(cfg.clone(), n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }

        let mut params = model.params.clone();
        for (name, t) in params.iter_mut() {
            let v = &t.value;
            let moved = match name {
                "gen.gru.w_xr" | "gen.gru.w_xu" | "gen.gru.w_xz" | "tm.lstm1.0.w_ih" => permute_rows(v, &perm),
                "gen.w_q" | "gen.w_k" | "tm.fc.w" | "tm.fc.b" => permute_cols(v, &perm),
                "head.l0.w" => {
                    let row_perm: Vec<usize> = (0..v.nrows())
                        .map(|r| {
                            let (t, c) = (r / (3 * n), r % (3 * n));
                            t * 3 * n + (c / n) * n + perm[c % n]
                        })
                        .collect();
                    permute_rows(v, &row_perm)
                }
                _ => continue,
            };
            *t = Tensor::new(moved);
        }
        let permuted = DhnnModel::from_params(cfg, n, params).unwrap();

        for s in samples.iter().step_by(17) {
            let snap = model.build_snapshot(s).unwrap();
            let edges: Vec<Hyperedge> = snap
                .hyperedges
                .iter()
                .map(|e| {
                    let mut nodes: Vec<usize> = e.nodes.iter().map(|&v| inv[v]).collect();
                    nodes.sort_unstable();
                    Hyperedge {
                        source: e.source,
                        nodes,
                    }
                })
                .collect();
            let snap_p = HypergraphSnapshot::from_parts(n, edges, snap.weights.clone(), snap.window_end).unwrap();
            let xp = permute_cols(&s.features, &perm);
            assert_eq!(xp.nrows(), m);
            let a = model.predict(&s.features, &snap).unwrap();
            let b = permuted.predict(&xp, &snap_p).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-8, "joint = {joint}: {} vs {}", a[0], b[0]);
            let att = model.attention(&s.features).unwrap();
            let att_p = permuted.attention(&xp).unwrap();
            let carried = Array2::from_shape_fn((n, n), |(i, j)| att[[perm[i], perm[j]]]);
            assert!((&carried - &att_p).iter().all(|d| d.abs() < 1e-12));
        }
    }
}

#[test]
fn persistence_repeats_last_target() {
    let values = Array2::from_shape_fn((20, 2), |(t, c)| if c == 1 { 4.0 } else { t as f64 });
    let table = SeriesTable::new(vec!["a".into(), "b".into()], values, 1).unwrap();
    let samples = make_windows(&table, 5, 3).unwrap();
    let preds = persistence_baseline(&samples, 1, 3);
    for (s, p) in samples.iter().zip(&preds) {
        assert_eq!(p.len(), 3);
        assert_eq!(p, &s.target);
    }
    let preds_a = persistence_baseline(&samples, 0, 3);
    assert!(preds_a.iter().zip(&samples).all(|(p, s)| p.iter().all(|&v| v == s.window_end as f64)));
}

fn paired() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

proptest! {
    #[test]
    fn rmse_dominates_mae((y, yhat) in paired()) {
        let r = MetricsReport::compute("d", "m", &y, &yhat).unwrap();
        prop_assert!(r.rmse >= r.mae - 1e-12);
        prop_assert!(r.mae >= 0.0);
        prop_assert_eq!(r.n_samples, y.len());
    }

    #[test]
    fn metrics_ignore_sample_order((y, yhat) in paired(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..y.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let hs: Vec<f64> = idx.iter().map(|&i| yhat[i]).collect();
        prop_assert!((rmse(&y, &yhat).unwrap() - rmse(&ys, &hs).unwrap()).abs() < 1e-12);
        prop_assert!((mae(&y, &yhat).unwrap() - mae(&ys, &hs).unwrap()).abs() < 1e-12);
        if y.iter().any(|&v| v != 0.0) {
            prop_assert!((mape(&y, &yhat).unwrap().value - mape(&ys, &hs).unwrap().value).abs() < 1e-9);
        }
    }

    #[test]
    fn mae_is_lipschitz((y, yhat) in paired(), i in any::<prop::sample::Index>(), delta in -1.0f64..1.0) {
        let i = i.index(y.len());
        let mut moved = yhat.clone();
        moved[i] += delta;
        let change = (mae(&y, &moved).unwrap() - mae(&y, &yhat).unwrap()).abs();
        prop_assert!(change <= delta.abs() / y.len() as f64 + 1e-12);
    }
}
