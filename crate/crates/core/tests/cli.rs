use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "horizon = 0.1\nalpha = 0.5\nsteps = 40\nmodes = 8\n\n[grid]\nextents = [1.0]\ncounts = [32]\n\n[y0]\npreset = \"mode1\"\n";

fn placement(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_placement"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn optimize_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out_dir = dir.path().join("out");
    let out = out_dir.to_string_lossy().into_owned();
    let run = placement(&["optimize", &cfg, "-o", &out]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(report["path"], "gp2");
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("mask.csv").exists());

    let check = placement(&["verify", &cfg, "--dir", &out]);
    assert_eq!(
        check.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&check.stdout)
    );
    assert!(out_dir.join("verify.json").exists());

    let mask = out_dir.join("mask.csv").to_string_lossy().into_owned();
    let ctl = dir.path().join("ctl").to_string_lossy().into_owned();
    let control = placement(&["control", &cfg, "--mask", &mask, "-o", &ctl]);
    assert_eq!(control.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&control.stdout).unwrap();
    assert!(v["terminal_residual"].as_f64().unwrap() < 1e-2);
}

#[test]
fn bathtub_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &CONFIG
            .replace("counts = [32]", "counts = [4]")
            .replace("modes = 8", "modes = 2"),
    );
    let field = dir.path().join("phi.csv");
    fs::write(&field, "x,value\n0.125,2\n0.375,1\n0.625,1\n0.875,0\n").unwrap();
    let field = field.to_string_lossy().into_owned();
    let out = placement(&["bathtub", &cfg, "--field", &field, "--relaxed"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["value"].as_f64().unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn bad_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("bogus = 1\n{CONFIG}"));
    let out = placement(&["optimize", &cfg, "-o", "unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let cfg = write_config(dir.path(), &CONFIG.replace("alpha = 0.5", "alpha = 1.5"));
    let out = placement(&["optimize", &cfg, "-o", "unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}

#[test]
fn missing_files_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = placement(&["optimize", &dir.path().join("nope.toml").to_string_lossy()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn shipped_configurations_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            placement_core::config::load_config(&path).unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 2);
}
