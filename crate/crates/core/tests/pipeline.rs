mod common;

use common::mode1;
use placement_core::config::parse_config;
use placement_core::pipeline::{optimize, run_pipeline};
use placement_core::Error;
use std::fs;
use std::path::Path;

fn small(extra: &str, y0: &str) -> String {
    format!(
        "horizon = 0.1\nalpha = 0.5\nsteps = 40\nmodes = 8\n{extra}\n[grid]\nextents = [1.0]\ncounts = [32]\n\n[y0]\n{y0}\n"
    )
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timings.json" {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn mode1_benchmark_end_to_end() {
    let cfg = mode1("");
    let out = run_pipeline(&cfg).unwrap();
    let r = &out.report;
    assert_eq!(r.path, "gp2");
    assert_eq!(r.q, 2.0);
    let game = r.game.as_ref().unwrap();
    assert!(game.gap <= 1e-6);
    assert!(game.r_theta <= 1e-6 * game.value.abs());
    assert!(game.r_psi <= 1e-6 * game.value.abs());
    let samples = r.samples.as_ref().unwrap();
    assert_eq!(samples.count, 100);
    assert_eq!(samples.failed, 0);
    assert_eq!(samples.violations, 0);
    // the relaxed actuator can only do better than the mask
    assert!(r.relaxed.norm <= r.mask.norm * (1.0 + 1e-9));
    assert!(r.mask.terminal_residual <= 1e-3);
    assert_eq!(r.actuator.cells, 64);
    for name in ["y0", "f_bar", "theta_eq", "mask"] {
        assert!(
            out.artifacts.fields.iter().any(|(n, _)| n == name),
            "{name}"
        );
    }
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = parse_config(&small("", "preset = \"mode1\"")).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    optimize(&cfg, a.path()).unwrap();
    optimize(&cfg, b.path()).unwrap();
    let fa = files(a.path());
    assert!(fa.iter().any(|(n, _)| n == "report.json"));
    assert!(fa.iter().any(|(n, _)| n == "mask.csv"));
    assert_eq!(fa, files(b.path()));
    assert!(a.path().join("timings.json").exists());
}

#[test]
fn zero_initial_state_fails_at_the_game_stage() {
    let cfg = parse_config(&small("", "coefficients = [0.0]")).unwrap();
    match run_pipeline(&cfg) {
        Err(Error::Precondition { stage, .. }) => assert_eq!(stage, "gp2"),
        other => panic!("expected a precondition error, got {other:?}"),
    }
}

#[test]
fn infinite_p_takes_the_relaxed_path() {
    let cfg = parse_config(&small(
        "p = \"inf\"\n[relaxed]\nmax_iterations = 40",
        "preset = \"mode1\"",
    ))
    .unwrap();
    assert_eq!(cfg.q(), 1.0);
    let out = run_pipeline(&cfg).unwrap();
    assert_eq!(out.report.path, "relaxed");
    assert!(out.report.game.is_none());
    assert!(out.report.actuator.heuristic);
    assert!(out.report.mask.norm.is_finite());
}

#[test]
fn failed_run_keeps_nothing_half_written() {
    let cfg = parse_config(&small("", "coefficients = [0.0]")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(optimize(&cfg, dir.path()).is_err());
    assert!(!dir.path().join("report.json").exists());
    for (name, _) in files(dir.path()) {
        assert!(!name.ends_with(".tmp"), "{name}");
    }
}
