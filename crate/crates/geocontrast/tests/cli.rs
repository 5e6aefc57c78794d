mod common;

use std::path::Path;
use std::process::{Command, Output};

fn geocontrast(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geocontrast"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GEOCONTRAST_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_data_gives_one_error_line_and_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = geocontrast(&["build-graphs", "--out", "run"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error[missing-prerequisite]:"), "{err}");
}

#[test]
fn bad_config_and_checkpoint_are_reported_by_category() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "version = 1\nno_such_key = 3\n").unwrap();
    let o = geocontrast(&["--config", "bad.toml", "build-graphs"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[config]:"), "{}", stderr(&o));

    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = geocontrast(&["inspect-checkpoint", "--checkpoint", "junk.ckpt"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[checkpoint]:"), "{}", stderr(&o));
}

#[test]
fn synth_then_build_graphs_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let o = geocontrast(&["synth", "--root", "data", "--train", "3", "--test", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = common::tiny_config(&dir.path().join("data"), &dir.path().join("run"));
    cfg.save(&dir.path().join("tiny.toml")).unwrap();
    let o = geocontrast(&["--config", "tiny.toml", "build-graphs"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("4 graph files"), "{out}");

    let o = geocontrast(&["--config", "tiny.toml", "train", "--stage", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = geocontrast(
        &["inspect-checkpoint", "--checkpoint", "run/stage1/last.ckpt"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["kind"], "stage1");
    assert_eq!(v["epoch"], 4);
}
