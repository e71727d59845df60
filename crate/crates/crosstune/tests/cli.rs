//! End-to-end runs of the binary: every subcommand, plus the exit code per
//! error class (0 ok, 1 self-check, 2 config, 3 data, 4 training, 5 run log).

mod common;

use std::path::Path;
use std::process::{Command, Output};

use crosstune::harness::{ExperimentConfig, FtStrategy, MatrixConfig};
use crosstune::task::synth::{make_synthetic_pair, SynthPairConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crosstune"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Small pair plus a fast experiment config, written into `dir`.
fn small_world(dir: &Path, strategy: FtStrategy) -> ExperimentConfig {
    let pair = make_synthetic_pair(&SynthPairConfig {
        train_per_class: 4,
        validation_per_class: 2,
        eval_per_class: 2,
        ..SynthPairConfig::default()
    })
    .unwrap();
    pair.a.write_to(dir).unwrap();
    pair.b.write_to(dir).unwrap();
    let mut cfg = ExperimentConfig {
        data_dir: dir.to_path_buf(),
        eval_task_id: "task_b".into(),
        ft_task_id: (strategy != FtStrategy::None).then(|| "task_a".into()),
        strategy,
        shots: vec![0, 1],
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    cfg.model.d = 8;
    cfg.optim.epochs = 2;
    cfg.optim.warmup_steps = 4;
    cfg
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

#[test]
fn synth_then_ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("pair");
    let out = run(&["synth", "--seed", "3", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    for file in [
        "task_a.task.json",
        "task_a.train.jsonl",
        "task_a.validation.jsonl",
        "task_a.eval.jsonl",
        "task_b.task.json",
        "task_b.train.jsonl",
        "task_b.validation.jsonl",
        "task_b.eval.jsonl",
    ] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }

    let data_dir = dir.path().join("data");
    let out = run(&[
        "ingest",
        "--task",
        out_dir.join("task_a.task.json").to_str().unwrap(),
        "--corpus",
        out_dir.join("task_a.train.jsonl").to_str().unwrap(),
        "--split",
        "train",
        "--data-dir",
        data_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(data_dir.join("task_a.task.json").exists());
    assert!(data_dir.join("task_a.train.jsonl").exists());

    // A missing spec file is a data error, not a crash.
    let out = run(&[
        "ingest",
        "--task",
        dir.path().join("nope.json").to_str().unwrap(),
        "--corpus",
        out_dir.join("task_a.train.jsonl").to_str().unwrap(),
        "--split",
        "train",
        "--data-dir",
        data_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(!stderr(&out).is_empty());
}

#[test]
fn train_sweep_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_world(dir.path(), FtStrategy::RandomLabel);
    let cfg_path = dir.path().join("exp.json");
    write_json(&cfg_path, &cfg);

    let train_out = dir.path().join("train_out");
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "11",
        "--out",
        train_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(train_out.join("checkpoint.bin").exists());
    assert!(train_out.join("trace.csv").exists());
    assert!(train_out.join("schedule.jsonl").exists());
    assert!(stdout(&out).contains("schedule fingerprint"));

    let runs_path = dir.path().join("runs.jsonl");
    let out = run(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--checkpoint",
        train_out.join("checkpoint.bin").to_str().unwrap(),
        "--runs",
        runs_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let sweep_stdout = stdout(&out);
    assert!(sweep_stdout.contains("0 shots:"), "got: {sweep_stdout}");
    assert!(sweep_stdout.contains("1 shots:"));

    let out = run(&["report", "--runs", runs_path.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report = stdout(&out);
    assert!(report.starts_with("eval_task,ft_task,strategy,shot_0"), "got: {report}");
    assert!(report.contains("task_b,task_a,random_label,"));
}

#[test]
fn matrix_prints_table_and_appends_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_world(dir.path(), FtStrategy::Regular);
    let matrix = MatrixConfig { runs: vec![cfg] };
    let cfg_path = dir.path().join("matrix.json");
    write_json(&cfg_path, &matrix);

    let runs_path = dir.path().join("runs.jsonl");
    let out = run(&[
        "matrix",
        "--config",
        cfg_path.to_str().unwrap(),
        "--runs",
        runs_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let table = stdout(&out);
    assert!(table.contains("| eval task | ft task | strategy |"), "got: {table}");
    assert!(table.contains("| task_b | task_a | regular |"));
    assert_eq!(std::fs::read_to_string(&runs_path).unwrap().lines().count(), 1);

    // A single experiment object (no "runs" wrapper) is accepted too.
    let single = small_world(dir.path(), FtStrategy::None);
    let single_path = dir.path().join("single.json");
    write_json(&single_path, &single);
    let out = run(&["matrix", "--config", single_path.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).starts_with("eval_task,ft_task,strategy,"));
}

#[test]
fn every_error_class_has_its_exit_code() {
    let dir = tempfile::tempdir().unwrap();

    // 2: config rejected before any work happens.
    let mut bad = small_world(dir.path(), FtStrategy::Regular);
    bad.ft_task_id = None;
    let bad_path = dir.path().join("bad.json");
    write_json(&bad_path, &bad);
    let out = run(&[
        "train",
        "--config",
        bad_path.to_str().unwrap(),
        "--seed",
        "0",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));

    // 2: clap usage errors share the config class.
    let out = run(&["definitely-not-a-subcommand"]);
    assert_eq!(code(&out), 2);

    // 3: config is fine but the task data is missing.
    let mut orphan = small_world(dir.path(), FtStrategy::None);
    orphan.eval_task_id = "task_zz".into();
    let orphan_path = dir.path().join("orphan.json");
    write_json(&orphan_path, &orphan);
    let out = run(&["matrix", "--config", orphan_path.to_str().unwrap()]);
    // Every cell failed, so the matrix reports a training-class failure.
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("task_zz"));

    // 5: missing run log.
    let out = run(&["report", "--runs", dir.path().join("none.jsonl").to_str().unwrap()]);
    assert_eq!(code(&out), 5, "stderr: {}", stderr(&out));
}

#[test]
fn check_command_reports_every_probe() {
    let out = run(&["check", "--gradient-seeds", "2"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for name in ["gradients", "metrics", "schedule", "adapter-init", "mapping-pools", "oracle"] {
        assert!(text.contains(&format!("PASS {name}")), "missing {name} in: {text}");
    }
    assert!(!text.contains("FAIL"));
}
