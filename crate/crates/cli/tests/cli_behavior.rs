//! CLI surface tests: exit codes, config validation, plot/evaluate
//! error paths. Heavier end-to-end behavior lives in the acceptance
//! suite.

use std::path::Path;
use std::process::Command;

fn dbkd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dbkd"))
}

fn write(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

#[test]
fn config_error_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    write(
        &cfg,
        "dataset.name = mnist\ndataset.root = /nonexistent\nbudget.n = 101\nbudget.m = 100\n\
         teacher.arch = lenet5\nstudent.arch = lenet5-half\nteacher.epochs = 1\n\
         student.epochs = 1\ngan.epochs = 1\n",
    );
    let out = dbkd()
        .args(["pipeline", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("budget.n"), "error should name the field: {err}");
}

#[test]
fn missing_config_file_exits_2() {
    let out = dbkd()
        .args(["pipeline", "--config", "/nonexistent/x.cfg", "--out", "/tmp"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_stop_after_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ok.cfg");
    write(
        &cfg,
        "dataset.name = mnist\ndataset.root = /nonexistent\nbudget.n = 100\nbudget.m = 100\n\
         teacher.arch = lenet5\nstudent.arch = lenet5-half\nteacher.epochs = 1\n\
         student.epochs = 1\ngan.epochs = 1\n",
    );
    let out = dbkd()
        .args(["pipeline", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path())
        .args(["--stop-after", "nonsense"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_stage_failure_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ok.cfg");
    write(
        &cfg,
        "dataset.name = mnist\ndataset.root = /nonexistent\nbudget.n = 100\nbudget.m = 100\n\
         teacher.arch = lenet5\nstudent.arch = lenet5-half\nteacher.epochs = 1\n\
         student.epochs = 1\ngan.epochs = 1\n",
    );
    let out = dbkd()
        .args(["pipeline", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_on_empty_dir_reports_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dbkd().args(["evaluate", "--run-dir"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing artifact"), "got: {err}");
}

#[test]
fn plot_without_metrics_reports_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dbkd().args(["plot", "--run-dir"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn lock_file_blocks_concurrent_runs() {
    // Simulate a held lock by pre-creating it where the run dir will be.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let cfg = dir.path().join("ok.cfg");
    write(
        &cfg,
        &format!(
            "dataset.name = mnist\ndataset.root = {}\nbudget.n = 100\nbudget.m = 100\n\
             teacher.arch = lenet5\nstudent.arch = lenet5-half\nteacher.epochs = 1\n\
             student.epochs = 1\ngan.epochs = 1\n",
            data.display()
        ),
    );
    // First, learn the run id by failing on the missing dataset.
    let out1 = dbkd()
        .args(["pipeline", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out1.status.code(), Some(3));
    let run_dir = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(Result::ok)
        .find(|e| e.file_name().to_string_lossy().starts_with("run-"))
        .expect("run dir created")
        .path();
    std::fs::write(run_dir.join(".lock"), "held\n").unwrap();
    let out2 = dbkd()
        .args(["pipeline", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path())
        .args(["--resume"])
        .output()
        .unwrap();
    assert_eq!(out2.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out2.stderr);
    assert!(err.contains("lock"), "got: {err}");
}
