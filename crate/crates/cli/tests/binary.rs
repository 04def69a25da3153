use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_dwe-lab");

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let out = dir.join("out");
    std::fs::write(&path, format!("out = {:?}\n{body}", out.display().to_string())).unwrap();
    path
}

const SHORT_DECAY: &str = "n = 16\n[damping]\npreset = \"constant\"\nc = 0.5\n[decay]\ndt = 2e-3\nt_end = 1.0\nevery = 10\n";

#[test]
fn unknown_subcommand_exits_2() {
    let st = Command::new(BIN).args(["frobnicate", "--config", "x.toml"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn invalid_config_exits_2_with_field_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n = 7\n");
    let out = Command::new(BIN).arg("decay").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n: must be even"));
}

#[test]
fn missing_config_exits_2() {
    let st = Command::new(BIN).args(["decay", "--config", "/nonexistent.toml"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn decay_run_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_DECAY);
    let run = |out: &Path| {
        let st = Command::new(BIN).arg("decay").arg("--config").arg(&cfg).arg("--out").arg(out).arg("--no-cache").status().unwrap();
        assert_eq!(st.code(), Some(0));
        std::fs::read_to_string(out.join("energy.csv")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b);
    assert!(a.starts_with("t,E\n"));
    for f in ["summary.txt", "report.json", "config.toml", "MANIFEST"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
    let manifest = std::fs::read_to_string(dir.path().join("a/MANIFEST")).unwrap();
    assert!(manifest.contains("energy.csv") && manifest.contains("columns: t,E"));
}

#[test]
fn threads_flag_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_DECAY);
    let st = Command::new(BIN).arg("decay").arg("--config").arg(&cfg).args(["--threads", "1", "--no-cache"]).status().unwrap();
    assert_eq!(st.code(), Some(0));
}
