use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dhnn_cli::{
    ATT_PARTITIONS_FILE, COM_PARTITIONS_FILE, DATASET_FILE, INIT_CHECKPOINT_FILE, LOCK_FILE, LOG_FILE, METRICS_FILE, MODEL_CHECKPOINT_FILE, NORM_STATS_FILE,
    SNAPSHOTS_FILE, SPECTRUM_FILE, TRAINED_SNAPSHOTS_FILE, TRAIN_REPORT_FILE,
};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn dhnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhnn"))
        .args(args)
        .env_remove("DHNN_THREADS")
        .output()
        .expect("binary runs")
}

fn run_stage(stage: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let dir = format!("output.dir={}", out.display());
    let config = config.to_str().unwrap();
    let mut args = vec![stage, "--config", config, "--set", &dir];
    for e in extra {
        args.push("--set");
        args.push(e);
    }
    dhnn(&args)
}

fn small_config() -> PathBuf {
    data_dir().join("synthetic_6.toml")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = std::fs::read(data_dir().join("synthetic_6.csv")).unwrap();
    let out = run_stage("run", &small_config(), tmp.path(), &["output.dump_spectrum=true"]);
    assert_ok(&out);
    for name in [
        DATASET_FILE,
        NORM_STATS_FILE,
        SNAPSHOTS_FILE,
        COM_PARTITIONS_FILE,
        ATT_PARTITIONS_FILE,
        SPECTRUM_FILE,
        INIT_CHECKPOINT_FILE,
        MODEL_CHECKPOINT_FILE,
        TRAIN_REPORT_FILE,
        METRICS_FILE,
        LOG_FILE,
    ] {
        assert!(tmp.path().join(name).is_file(), "{name} missing");
    }
    assert!(!tmp.path().join(LOCK_FILE).exists());
    assert!(!tmp.path().join(TRAINED_SNAPSHOTS_FILE).exists());
    let metrics = std::fs::read_to_string(tmp.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "dataset, model, rmse, mae, mape, n, excluded_mape_terms");
    assert!(lines[1].starts_with("synthetic_6, dhnn, "));
    assert!(lines[2].starts_with("synthetic_6, persistence, "));
    assert_eq!(std::fs::read(data_dir().join("synthetic_6.csv")).unwrap(), data);

    let coms = std::fs::read_to_string(tmp.path().join(COM_PARTITIONS_FILE)).unwrap();
    let first: Vec<Vec<&str>> = coms.lines().take(6).map(|l| l.split(", ").collect()).collect();
    assert!(first.iter().all(|f| f.len() == 3 && f[0] == first[0][0]));
    let names: Vec<&str> = first.iter().map(|f| f[1]).collect();
    let header = String::from_utf8(data).unwrap();
    let columns: Vec<&str> = header.lines().next().unwrap().split(',').collect();
    assert!(names.iter().all(|n| columns.contains(n)));
}

#[test]
fn staged_commands_match_a_full_run() {
    let staged = tempfile::tempdir().unwrap();
    let whole = tempfile::tempdir().unwrap();
    let joint = ["model.refresh_every=2"];
    for stage in ["ingest", "build", "train", "evaluate"] {
        assert_ok(&run_stage(stage, &small_config(), staged.path(), &joint));
    }
    assert_ok(&run_stage("run", &small_config(), whole.path(), &joint));
    for name in [
        DATASET_FILE,
        SNAPSHOTS_FILE,
        TRAINED_SNAPSHOTS_FILE,
        MODEL_CHECKPOINT_FILE,
        TRAIN_REPORT_FILE,
        METRICS_FILE,
    ] {
        assert_eq!(
            std::fs::read(staged.path().join(name)).unwrap(),
            std::fs::read(whole.path().join(name)).unwrap(),
            "{name}"
        );
    }
    // Re-running a stage overwrites with identical bytes.
    let before = std::fs::read(staged.path().join(MODEL_CHECKPOINT_FILE)).unwrap();
    assert_ok(&run_stage("train", &small_config(), staged.path(), &joint));
    assert_eq!(std::fs::read(staged.path().join(MODEL_CHECKPOINT_FILE)).unwrap(), before);
}

#[test]
fn inspect_prints_the_stored_record() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&run_stage("ingest", &small_config(), tmp.path(), &[]));
    assert_ok(&run_stage("build", &small_config(), tmp.path(), &[]));
    let archive = tmp.path().join(SNAPSHOTS_FILE);
    let text = std::fs::read_to_string(&archive).unwrap();
    let starts: Vec<usize> = text.match_indices("SNAPSHOT").map(|(i, _)| i).collect();
    let record = &text[starts[3]..starts[4]];
    let out = dhnn(&["inspect", archive.to_str().unwrap(), "--index", "3"]);
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with(record));
    assert!(stdout[record.len()..].lines().all(|l| l.starts_with('#')));

    let out = dhnn(&["inspect", archive.to_str().unwrap(), "--index", "100000"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn window_not_longer_than_series_count_is_rejected_early() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = run_stage("run", &small_config(), &out_dir, &["model.window_m=6"]);
    assert_eq!(out.status.code(), Some(dhnn_cli::EXIT_VALIDATION));
    assert!(String::from_utf8_lossy(&out.stderr).contains("window_m"));
    assert!(!out_dir.exists(), "no partial outputs");
}

#[test]
fn distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let out = dhnn(&["ingest", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(dhnn_cli::EXIT_MISSING_INPUT));

    let out = run_stage("train", &small_config(), tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(dhnn_cli::EXIT_MISSING_INPUT));

    let out = run_stage("ingest", &small_config(), tmp.path(), &["model.bogus=1"]);
    assert_eq!(out.status.code(), Some(dhnn_cli::EXIT_USAGE));

    let out = run_stage("ingest", &small_config(), tmp.path(), &["data.target_column=absent"]);
    assert_eq!(out.status.code(), Some(dhnn_cli::EXIT_VALIDATION));

    std::fs::write(tmp.path().join(LOCK_FILE), "1").unwrap();
    let out = run_stage("ingest", &small_config(), tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(dhnn_cli::EXIT_LOCKED));

    let out = Command::new(env!("CARGO_BIN_EXE_dhnn"))
        .args(["inspect", "x.txt"])
        .env("DHNN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(dhnn_cli::EXIT_USAGE));

    let help = dhnn(&["--help"]);
    let text = String::from_utf8_lossy(&help.stdout);
    for code in ["2  usage", "3  missing", "4  validation", "5  numeric", "6  I/O", "7  output"] {
        assert!(text.contains(code), "help lacks {code:?}");
    }
}

#[test]
fn raw_metrics_use_original_scale() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&run_stage("run", &small_config(), tmp.path(), &["model.max_epochs=2"]));
    let normalized = std::fs::read_to_string(tmp.path().join(METRICS_FILE)).unwrap();
    assert_ok(&run_stage("evaluate", &small_config(), tmp.path(), &["eval.metrics_on=raw", "model.max_epochs=2"]));
    let raw = std::fs::read_to_string(tmp.path().join(METRICS_FILE)).unwrap();
    assert_ne!(raw, normalized);
    let rmse = |text: &str, row: usize| -> f64 {
        text.lines().nth(row).unwrap().split(", ").nth(2).unwrap().parse().unwrap()
    };
    assert!(rmse(&raw, 1) > 0.0 && rmse(&raw, 2) > 0.0);
}

#[test]
fn bundled_data_matches_the_generator() {
    let tmp = tempfile::tempdir().unwrap();
    for (file, args) in [
        ("synthetic_6.csv", ["2", "3", "800", "0.1", "11"]),
        ("synthetic_12.csv", ["3", "4", "3000", "0.1", "7"]),
    ] {
        let out = tmp.path().join(file);
        let o = dhnn(&[
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--communities",
            args[0],
            "--per-community",
            args[1],
            "--length",
            args[2],
            "--noise",
            args[3],
            "--seed",
            args[4],
        ]);
        assert_ok(&o);
        assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(data_dir().join(file)).unwrap(), "{file}");
        let labels = file.replace(".csv", "_labels.csv");
        assert_eq!(
            std::fs::read(tmp.path().join(&labels)).unwrap(),
            std::fs::read(data_dir().join(&labels)).unwrap()
        );
    }
}
