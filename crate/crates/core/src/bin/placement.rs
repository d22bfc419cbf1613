//! Command-line front end.
//!
//! Exit codes: 0 success, 1 a `verify` check failed, 2 configuration error,
//! 3 solver non-convergence, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use placement_core::bathtub::{bathtub_max_binary, bathtub_max_relaxed, BathtubSolution};
use placement_core::config::{load_config, RunConfig};
use placement_core::dual::{solve_min_j, DualCoefficients};
use placement_core::game::{nash_residual, optimality_sample_test, NashProbes, NashResiduals};
use placement_core::heat::solve_forward;
use placement_core::output::{ensure_dir, read_field, write_field, write_json, write_trajectory};
use placement_core::pipeline::{optimize, output_dir};
use placement_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "placement",
    version,
    about = "Optimal actuator placement for null-controlled heat equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: equilibrium, actuator, controls, audits, report.
    Optimize {
        config: PathBuf,
        /// Overrides `output` from the configuration.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Minimum-norm control for a given actuator amplitude (a field CSV).
    Control {
        config: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Bathtub rearrangement of a field CSV at mass fraction `alpha`.
    Bathtub {
        config: PathBuf,
        #[arg(long)]
        field: PathBuf,
        /// Overrides `alpha` from the configuration.
        #[arg(long)]
        alpha: Option<f64>,
        /// Relaxed (density) maximizer instead of a binary mask.
        #[arg(long)]
        relaxed: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Recomputes equilibrium residuals and the sampled audit from the files
    /// of a previous `optimize` run.
    Verify {
        config: PathBuf,
        /// Directory written by `optimize`; defaults to the configured output.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct ControlReport {
    norm: f64,
    value: f64,
    control_norm: f64,
    terminal_residual: f64,
    iterations: usize,
}

#[derive(Serialize)]
struct VerifyReport {
    residuals: NashResiduals,
    tolerance: f64,
    samples: usize,
    violations: usize,
    min_gap: Option<f64>,
    passed: bool,
}

fn print_json<T: Serialize>(value: &T) {
    use std::io::Write;
    match serde_json::to_string_pretty(value) {
        // a closed pipe is not an error of the run
        Ok(s) => {
            let _ = writeln!(std::io::stdout(), "{s}");
        }
        Err(e) => eprintln!("cannot format output: {e}"),
    }
}

fn control(cfg: &RunConfig, mask: &Path, output: Option<&Path>) -> Result<()> {
    let params = cfg.build_params()?;
    let y0 = cfg.initial_state(&params)?;
    let beta = read_field(mask, params.grid())?;
    let r = solve_min_j(&beta, cfg.q(), &y0, &params, &cfg.dual)?;
    let report = ControlReport {
        norm: r.norm,
        value: r.value,
        control_norm: r.control_norm,
        terminal_residual: r.terminal_residual / params.grid().norm(&y0),
        iterations: r.iterations,
    };
    if let Some(dir) = output.map(Path::to_path_buf).or_else(|| cfg.output.clone()) {
        ensure_dir(&dir)?;
        let state = solve_forward(&y0, &beta, Some(&r.control), &params)?;
        write_trajectory(
            &dir,
            "control",
            &r.control,
            params.grid(),
            cfg.snapshot_stride,
        )?;
        write_trajectory(&dir, "state", &state, params.grid(), cfg.snapshot_stride)?;
        write_json(&dir.join("z.json"), &r.z)?;
        write_json(&dir.join("control.json"), &report)?;
    }
    print_json(&report);
    Ok(())
}

fn bathtub(
    cfg: &RunConfig,
    field: &Path,
    alpha: Option<f64>,
    relaxed: bool,
    output: Option<&Path>,
) -> Result<()> {
    let grid = cfg.build_grid()?;
    let phi = read_field(field, &grid)?;
    let alpha = alpha.unwrap_or(cfg.alpha);
    let s: BathtubSolution = if relaxed {
        bathtub_max_relaxed(&phi, alpha, &grid)?
    } else {
        bathtub_max_binary(&phi, alpha, &grid, cfg.tie_rule)?
    };
    if let Some(dir) = output {
        ensure_dir(dir)?;
        write_field(&dir.join("optimizer.csv"), &s.optimizer, &grid)?;
        write_json(&dir.join("bathtub.json"), &s)?;
    }
    print_json(&serde_json::json!({
        "threshold": s.threshold,
        "alpha_upper": s.alpha_upper,
        "alpha_lower": s.alpha_lower,
        "value": s.value,
        "tie_mass": s.tie_mass,
        "measure_defect": s.measure_defect,
        "degenerate": s.degenerate,
    }));
    Ok(())
}

fn verify(cfg: &RunConfig, dir: &Path) -> Result<bool> {
    if cfg.p.0 != 2.0 {
        return Err(Error::Unsupported(
            "verification of the equilibrium needs p = 2".into(),
        ));
    }
    let params = cfg.build_params()?;
    let grid = params.grid();
    let y0 = cfg.initial_state(&params)?;
    let theta = read_field(&dir.join("theta_eq.csv"), grid)?;
    let mask = read_field(&dir.join("mask.csv"), grid)?;
    let z_path = dir.join("z_bar.json");
    let text = std::fs::read_to_string(&z_path).map_err(|e| Error::io(&z_path, e))?;
    let z: DualCoefficients = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let probes = NashProbes {
        theta_probes: cfg.nash.theta_probes,
        psi_probes: cfg.nash.psi_probes,
        seed: cfg.seed,
    };
    let residuals = nash_residual(&theta, &z, &y0, 2.0, &params, cfg.dual.tikhonov, &probes)?;
    let table = optimality_sample_test(
        &mask,
        &y0,
        cfg.alpha,
        2.0,
        &params,
        &cfg.dual,
        cfg.nash.samples,
        cfg.seed,
    )?;
    let tolerance = 1e-6 * residuals.value.abs();
    let passed =
        residuals.r_theta <= tolerance && residuals.r_psi <= tolerance && table.violations == 0;
    let report = VerifyReport {
        residuals,
        tolerance,
        samples: table.rows.len(),
        violations: table.violations,
        min_gap: table.min_gap(),
        passed,
    };
    write_json(&dir.join("verify.json"), &report)?;
    print_json(&report);
    Ok(passed)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Optimize { config, output } => {
            let cfg = load_config(&config)?;
            let dir = output_dir(&cfg, output.as_deref())?;
            let out = optimize(&cfg, &dir)?;
            print_json(&out.report);
            Ok(true)
        }
        Command::Control {
            config,
            mask,
            output,
        } => {
            control(&load_config(&config)?, &mask, output.as_deref())?;
            Ok(true)
        }
        Command::Bathtub {
            config,
            field,
            alpha,
            relaxed,
            output,
        } => {
            bathtub(
                &load_config(&config)?,
                &field,
                alpha,
                relaxed,
                output.as_deref(),
            )?;
            Ok(true)
        }
        Command::Verify { config, dir } => {
            let cfg = load_config(&config)?;
            let dir = output_dir(&cfg, dir.as_deref())?;
            verify(&cfg, &dir)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
