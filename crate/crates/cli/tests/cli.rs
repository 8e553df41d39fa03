use std::path::Path;
use std::process::{Command, Output};

use metascale_core::forecaster::ForecastConfig;
use metascale_core::harness::{read_report, PipelineConfig};
use metascale_core::meta::AnpConfig;
use metascale_core::scaler::PolicyConfig;
use metascale_core::workload::{DataOptions, FleetOptions};

fn metascale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metascale"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Writes a configuration small enough for a whole run to take seconds.
fn tiny_config(dir: &Path) -> String {
    let mut cfg = PipelineConfig {
        out_dir: dir.join("run"),
        seed: 5,
        ..PipelineConfig::default()
    };
    cfg.data = DataOptions {
        train_apps: 2,
        heldout_apps: 1,
        weeks: 2,
        freq_minutes: 60,
        epoch_steps: 4,
        fleet: FleetOptions {
            d: 2,
            ..FleetOptions::default()
        },
        ..DataOptions::default()
    };
    cfg.forecaster = ForecastConfig {
        l: 48,
        h: 8,
        p: 24,
        m: 4,
        heads: 1,
        hidden: 6,
        attn: 6,
        mlp: 8,
        cov_dim: 2,
        epochs: 2,
        windows_per_epoch: 32,
        val_windows: 16,
        ..ForecastConfig::default()
    };
    cfg.meta = AnpConfig {
        repr: 6,
        latent: 2,
        hidden: 6,
        heads: 1,
        context_len: 24,
        target_len: 4,
        iterations: 30,
        eval_every: 10,
        val_tasks: 4,
        ..AnpConfig::default()
    };
    cfg.policy = PolicyConfig {
        hidden: 6,
        iterations: 10,
        batch: 8,
        ..PolicyConfig::default()
    };
    cfg.starts.contexts = 6;
    cfg.starts.states_per_context = 2;
    cfg.eval.seeds = vec![0, 1];
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn config_prints_parseable_defaults() {
    let text = stdout(&metascale(&["config"]));
    let parsed = PipelineConfig::from_toml_str(&text).unwrap();
    assert_eq!(parsed, PipelineConfig::default());

    let text = stdout(&metascale(&[
        "--seed",
        "9",
        "--eval-seeds",
        "3,4",
        "config",
    ]));
    let parsed = PipelineConfig::from_toml_str(&text).unwrap();
    assert_eq!(parsed.seed, 9);
    assert_eq!(parsed.eval.seeds, vec![3, 4]);
}

#[test]
fn staged_run_matches_pipeline_and_reports_render() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let staged = tmp.path().join("staged");
    let staged_s = staged.display().to_string();
    for stage in [
        "gen-data",
        "train-forecaster",
        "train-meta",
        "train-policy",
        "evaluate",
    ] {
        stdout(&metascale(&["--config", &cfg, "--out", &staged_s, stage]));
    }
    let whole = tmp.path().join("whole");
    let table = stdout(&metascale(&[
        "--config",
        &cfg,
        "--out",
        &whole.display().to_string(),
        "pipeline",
    ]));
    assert!(table.lines().any(|l| l.starts_with("| learned |")));

    let a = std::fs::read(staged.join("report.json")).unwrap();
    let b = std::fs::read(whole.join("report.json")).unwrap();
    assert_eq!(a, b, "staged and one-shot runs disagree");
    let report = read_report(a.as_slice()).unwrap();

    let csv = stdout(&metascale(&[
        "--config", &cfg, "--out", &staged_s, "report", "--format", "csv",
    ]));
    assert!(csv.lines().all(|l| l.split(',').count() == 12));
    let md_path = tmp.path().join("out").join("table.md");
    stdout(&metascale(&[
        "--config",
        &cfg,
        "--out",
        &staged_s,
        "report",
        "--format",
        "md",
        "--output",
        &md_path.display().to_string(),
    ]));
    assert_eq!(
        std::fs::read_to_string(&md_path).unwrap().lines().count(),
        5
    );

    // RCS recounted from a trace file agrees with the report
    let trace = staged.join("traces").join("rule-seed1.csv");
    let text = stdout(&metascale(&[
        "--config",
        &cfg,
        "rcs",
        &trace.display().to_string(),
    ]));
    let seed0 = staged.join("traces").join("rule-seed0.csv");
    let text0 = stdout(&metascale(&[
        "--config",
        &cfg,
        "rcs",
        &seed0.display().to_string(),
    ]));
    for (line, line0) in text.lines().zip(text0.lines()) {
        let (app, r1) = line.split_once('\t').unwrap();
        let r0: f64 = line0.split_once('\t').unwrap().1.parse().unwrap();
        let r1: f64 = r1.parse().unwrap();
        let a = report.apps.iter().find(|x| x.app_id == app).unwrap();
        let expected = a.methods[&metascale_core::harness::Method::Rule].rcs_mean;
        assert!((0.5 * (r0 + r1) - expected).abs() < 1e-6, "{app}");
    }

    // simulate reproduces the evaluation traces for the same seed
    let sim = tmp.path().join("oracle.csv");
    let lines = stdout(&metascale(&[
        "--config",
        &cfg,
        "--out",
        &staged_s,
        "simulate",
        "--method",
        "oracle",
        "--eval-seed",
        "1",
        "--output",
        &sim.display().to_string(),
    ]));
    assert_eq!(lines.lines().count(), report.apps.len());
    assert_eq!(
        std::fs::read(&sim).unwrap(),
        std::fs::read(staged.join("traces").join("oracle-seed1.csv")).unwrap()
    );
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let empty = tmp.path().join("empty").display().to_string();

    let o = metascale(&["--config", &cfg, "--out", &empty, "train-policy"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: stage `gen-data` failed"), "{err}");

    let o = metascale(&[
        "--config", &cfg, "--out", &empty, "report", "--format", "xml",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown report format"));

    let o = metascale(&[
        "--config", &cfg, "--out", &empty, "simulate", "--method", "magic",
    ]);
    assert!(!o.status.success());

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[eval.rule]\nlow = 0.5\nhigh = 0.45\n").unwrap();
    let o = metascale(&["--config", &bad.display().to_string(), "config"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = metascale(&[
        "--config",
        &tmp.path().join("missing.toml").display().to_string(),
        "config",
    ]);
    assert!(!o.status.success());
}
