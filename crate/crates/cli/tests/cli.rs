use std::path::Path;
use std::process::{Command, Output};

use kfpo::learner::RunRecord;
use kfpo_cli::trace::{read_aggregate, TRACE_HEADER};
use kfpo_cli::{aggregate, emit_trace, presets, read_trace, run_experiment, ExperimentConfig, Mode, Overrides};

fn kfpo(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kfpo"))
        .args(args)
        .env("KFPO_OUT_DIR", out_root)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SCALAR: &str = r#"{"A": [[0.9]], "C": [[1.0]], "M": 2, "Q": [[1.0]], "R": [[0.5]], "mode": "gd", "iters": 20}"#;

#[test]
fn non_square_a_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        r#"{"A": [[1.0, 0.0]], "C": [[1.0, 0.0]], "M": 2, "Q": [[1.0]], "R": [[1.0]]}"#,
    );
    let out = kfpo(&["validate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`A`"));
}

#[test]
fn unparseable_field_reports_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        r#"{"A": [[0.9]], "C": [[1.0]], "M": 2, "Q": [[1.0]], "R": [[0.5, "x"]]}"#,
    );
    let out = kfpo(&["gd", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`R`"), "{err}");

    let cfg = write(
        dir.path(),
        "mode.json",
        r#"{"A": [[0.9]], "C": [[1.0]], "M": 2, "Q": [[1.0]], "R": [[0.5]], "mode": "fly"}"#,
    );
    let out = kfpo(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mode"));
}

#[test]
fn failed_assumptions_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    // Q indefinite.
    let cfg = write(
        dir.path(),
        "q.json",
        r#"{"A": [[0.9]], "C": [[1.0]], "M": 2, "Q": [[-1.0]], "R": [[0.5]]}"#,
    );
    assert_eq!(kfpo(&["validate", "--config", &cfg], dir.path()).status.code(), Some(3));
    assert_eq!(kfpo(&["gd", "--config", &cfg], dir.path()).status.code(), Some(3));
    // (C, A) unobservable.
    let cfg = write(
        dir.path(),
        "obs.json",
        r#"{"A": [[0.5, 0.0], [0.0, 0.7]], "C": [[1.0, 0.0]], "M": 2, "Q": [[1.0, 0.0], [0.0, 1.0]], "R": [[1.0]]}"#,
    );
    assert_eq!(kfpo(&["riccati", "--config", &cfg], dir.path()).status.code(), Some(3));
}

#[test]
fn divergence_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.json", SCALAR);
    let out = kfpo(
        &[
            "sgd",
            "--config",
            &cfg,
            "--eta",
            "50",
            "--iters",
            "50",
            "--samples",
            "20",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
    let ok = kfpo(&["run", "--config", &cfg], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("s").join("gd_trace.csv").exists());
}

#[test]
fn every_subcommand_runs_on_a_small_system() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.json", SCALAR);
    let out_dir = dir.path().join("o");
    let out_dir = out_dir.to_str().unwrap();
    let expected = [
        ("validate", None),
        ("simulate", Some("trajectory_seed4.csv")),
        ("riccati", Some("riccati.json")),
        ("check-gradient", Some("check_gradient.csv")),
        ("constants", Some("constants.json")),
        ("oracle-compare", Some("oracle_compare.csv")),
        ("gd", Some("gd_trace.csv")),
        ("sgd", Some("sgd_aggregate.csv")),
    ];
    for (cmd, file) in expected {
        let out = kfpo(
            &[
                cmd,
                "--config",
                &cfg,
                "--out",
                out_dir,
                "--seed",
                "4",
                "--iters",
                "30",
                "--dual-samples",
                "20000",
            ],
            dir.path(),
        );
        assert_eq!(
            out.status.code(),
            Some(0),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        if let Some(f) = file {
            assert!(Path::new(out_dir).join(f).exists(), "{cmd} wrote no {f}");
        }
    }
    let riccati: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(out_dir).join("riccati.json")).unwrap()).unwrap();
    assert_eq!(riccati["gains"].as_array().unwrap().len(), 2);
    let traj = std::fs::read_to_string(Path::new(out_dir).join("trajectory_seed4.csv")).unwrap();
    // Header plus x_0 .. x_{M+N}.
    assert_eq!(traj.lines().count(), 1 + 4);
}

#[test]
fn presets_list_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let out = kfpo(&["presets"], dir.path());
    let listed = String::from_utf8(out.stdout).unwrap();
    assert_eq!(listed.lines().collect::<Vec<_>>(), presets::names().collect::<Vec<_>>());
    assert_eq!(kfpo(&["gd", "--preset", "missing"], dir.path()).status.code(), Some(2));
}

#[test]
fn gd_preset_trace_has_one_line_per_iterate() {
    let dir = tempfile::tempdir().unwrap();
    let out = kfpo(&["gd", "--preset", "reference-gd"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let path = dir.path().join("reference-gd").join("gd_trace.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + 1001);
    assert_eq!(text.lines().next().unwrap(), TRACE_HEADER.join(","));
    let records = read_trace(&path).unwrap();
    assert!(records.iter().all(|r| r.seconds == 0.0));
}

fn sample_records() -> Vec<RunRecord> {
    vec![
        RunRecord {
            iter: 0,
            cost: 0.1 + 0.2,
            normalized_error: f64::NAN,
            grad_norm: 1e-300,
            seconds: 0.125,
        },
        RunRecord {
            iter: 1,
            cost: std::f64::consts::PI,
            normalized_error: -0.0,
            grad_norm: f64::MAX,
            seconds: 3.0e-7,
        },
    ]
}

#[test]
fn trace_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested").join("t.csv");
    let records = sample_records();
    emit_trace(&records, &path, true).unwrap();
    let back = read_trace(&path).unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        assert_eq!(a.iter, b.iter);
        for (x, y) in [
            (a.cost, b.cost),
            (a.normalized_error, b.normalized_error),
            (a.grad_norm, b.grad_norm),
            (a.seconds, b.seconds),
        ] {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    emit_trace(&records, &path, false).unwrap();
    assert!(read_trace(&path).unwrap().iter().all(|r| r.seconds == 0.0));
}

#[test]
fn empty_trace_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    emit_trace(&[], &path, false).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "iter,cost,normalized_error,grad_norm,seconds\n"
    );
    assert!(read_trace(&path).unwrap().is_empty());
}

#[test]
fn unwritable_path_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = emit_trace(&sample_records(), &blocker.join("t.csv"), false).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}

#[test]
fn aggregate_matches_the_emitted_traces() {
    let dir = tempfile::tempdir().unwrap();
    let doc = presets::load("reference-sgd-l200").unwrap();
    let over = Overrides {
        mode: Some(Mode::Sgd),
        iters: Some(40),
        samples: Some(30),
        seeds: Some(vec![1, 2, 3]),
        out: Some(dir.path().to_path_buf()),
        ..Overrides::default()
    };
    let config = ExperimentConfig::resolve("agg", &doc, &over).unwrap();
    let report = run_experiment(&config).unwrap();
    assert_eq!(report.exit_code(), 0);
    let traces: Vec<Vec<RunRecord>> = report.traces.iter().map(|t| read_trace(&t.path).unwrap()).collect();
    let slices: Vec<&[RunRecord]> = traces.iter().map(Vec::as_slice).collect();
    let recomputed = aggregate(&slices);
    let written = read_aggregate(&dir.path().join("sgd_aggregate.csv")).unwrap();
    assert_eq!(written, recomputed);
    assert_eq!(written, report.aggregate);
    assert_eq!(written.len(), 41);
    for row in &written {
        assert!(row.min <= row.mean && row.mean <= row.max, "{row:?}");
    }
}
