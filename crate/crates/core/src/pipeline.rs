//! End-to-end placement run: equilibrium, actuator extraction, minimum-norm
//! controls, audits and the report.
//!
//! All game values in the report use the minimizing orientation
//! `inf_ψ ½‖ψ‖²_NF + ⟨y0, ψ(0)⟩`; the control-side values `V_q` are minima of
//! the dual functional and equal `-½N_p²`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::bathtub::{bathtub_max_binary, BathtubSolution, TieRule};
use crate::config::RunConfig;
use crate::dual::{solve_min_j, DualCoefficients, GramianDiagnostic, MinNormResult};
use crate::error::{Error, Result};
use crate::game::{
    aggregated_energy, extract_actuator, nash_residual, optimality_sample_test, solve_gp2,
    solve_relaxed_location, Gp2Options, NashProbes,
};
use crate::grid::{Field, Grid};
use crate::heat::{solve_forward, PdeParams, Trajectory};
use crate::output::{ensure_dir, write_field, write_json, write_trajectory};

pub const ORIENTATION: &str =
    "game values: inf over psi of 1/2 |psi|_NF^2 + <y0, psi(0)>; V_q = min J = -N_p^2/2";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActuatorSummary {
    /// `c_f̄`.
    pub threshold: f64,
    /// Mass fraction of `{f̄ ≥ c}`.
    pub alpha_upper: f64,
    /// Mass fraction of `{f̄ > c}`.
    pub alpha_lower: f64,
    /// `|∫ω̄ - α·|Ω||`, nonzero when `α·n` is not an integer.
    pub measure_defect: f64,
    pub tie_mass: f64,
    pub degenerate: bool,
    /// Set for `p ≠ 2`, where the binary extraction carries no optimality claim.
    pub heuristic: bool,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlSummary {
    /// `N_p` from the dual minimum.
    pub norm: f64,
    /// `V_q`.
    pub value: f64,
    /// `‖ū‖_{L^p L²}` of the recovered control.
    pub control_norm: f64,
    /// `|V_q + ½‖ū‖²| / max(1, ‖ū‖²)`.
    pub value_relation_residual: f64,
    /// `‖y(T)‖ / ‖y0‖`.
    pub terminal_residual: f64,
    pub gramian: GramianDiagnostic,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameSummary {
    /// Upper bound `Φ(ψ̄)`.
    pub value: f64,
    /// `min_ψ payoff(θ̄, ψ)`.
    pub lower_bound: f64,
    pub gap: f64,
    pub iterations: usize,
    pub subgradient_norm: f64,
    /// `payoff(θ̄, ψ̄)`.
    pub payoff: f64,
    pub r_theta: f64,
    pub r_psi: f64,
    /// `‖√θ̄(ψ̄ - ψ(θ̄))‖/‖√θ̄ψ̄‖` in `L²(0,T;L²)` between the equilibrium
    /// adjoint and the minimum-norm adjoint of the relaxed actuator. The
    /// coefficients themselves are poorly determined in weakly observed modes.
    pub psi_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSummary {
    pub count: usize,
    pub failed: usize,
    pub violations: usize,
    pub tolerance: f64,
    pub min_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementReport {
    pub orientation: String,
    /// `"gp2"` for `p = 2`, `"relaxed"` otherwise.
    pub path: String,
    pub config: RunConfig,
    pub q: f64,
    pub actuator: ActuatorSummary,
    /// Control with the binary actuator `ω̄`.
    pub mask: ControlSummary,
    /// Control with the relaxed actuator `β̄ = √θ̄`, `θ̄` the equilibrium
    /// density for `p = 2` and the ascent limit otherwise.
    pub relaxed: ControlSummary,
    pub game: Option<GameSummary>,
    pub samples: Option<SampleSummary>,
    /// Relative change of `N_p(ω̄)` when the other tie rule is used; zero when
    /// both rules give the same mask.
    pub tie_rule_gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
    pub total: f64,
}

/// Fields, trajectories and coefficient vectors produced by a run.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub fields: Vec<(String, Field)>,
    pub trajectories: Vec<(String, Trajectory)>,
    pub coefficients: Vec<(String, DualCoefficients)>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: PlacementReport,
    pub artifacts: Artifacts,
    pub timings: Timings,
    pub grid: Grid,
}

struct Clock {
    start: Instant,
    last: Instant,
    timings: Timings,
}

impl Clock {
    fn new() -> Self {
        let now = Instant::now();
        Clock {
            start: now,
            last: now,
            timings: Timings::default(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings
            .stages
            .push((stage.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    fn finish(mut self) -> Timings {
        self.timings.total = self.start.elapsed().as_secs_f64();
        self.timings
    }
}

fn summarize(r: &MinNormResult, y0: &Field, grid: &Grid) -> ControlSummary {
    let n2 = r.control_norm * r.control_norm;
    ControlSummary {
        norm: r.norm,
        value: r.value,
        control_norm: r.control_norm,
        value_relation_residual: (r.value + 0.5 * n2).abs() / n2.max(1.0),
        terminal_residual: r.terminal_residual / grid.norm(y0),
        gramian: r.gramian,
        iterations: r.iterations,
    }
}

fn observed_gap(
    a: &DualCoefficients,
    b: &DualCoefficients,
    theta: &Field,
    params: &PdeParams,
) -> f64 {
    let g = params.gramian(theta);
    let d = a.as_vector() - b.as_vector();
    (d.dot(&(&g * &d)).max(0.0) / a.as_vector().dot(&(&g * a.as_vector()))).sqrt()
}

fn actuator_summary(s: &BathtubSolution, heuristic: bool) -> ActuatorSummary {
    ActuatorSummary {
        threshold: s.threshold,
        alpha_upper: s.alpha_upper,
        alpha_lower: s.alpha_lower,
        measure_defect: s.measure_defect,
        tie_mass: s.tie_mass,
        degenerate: s.degenerate,
        heuristic,
        cells: s.optimizer.iter().filter(|&&v| v == 1.0).count(),
    }
}

fn other_rule(rule: TieRule) -> TieRule {
    match rule {
        TieRule::LowestIndex => TieRule::SymmetricPairing,
        TieRule::SymmetricPairing => TieRule::LowestIndex,
    }
}

/// Runs the whole pipeline, collecting outputs into `artifacts` as stages
/// finish so a failing run can still flush what it has.
pub fn run_into(
    cfg: &RunConfig,
    artifacts: &mut Artifacts,
) -> Result<(PlacementReport, Timings, Grid)> {
    cfg.validate()?;
    let mut clock = Clock::new();
    let params = cfg.build_params()?;
    let grid = params.grid().clone();
    let y0 = cfg.initial_state(&params)?;
    artifacts.fields.push(("y0".into(), y0.clone()));
    clock.lap("setup");
    let report = if cfg.p.0 == 2.0 {
        run_gp2(cfg, &params, &y0, artifacts, &mut clock)?
    } else {
        run_relaxed(cfg, &params, &y0, artifacts, &mut clock)?
    };
    Ok((report, clock.finish(), grid))
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutput> {
    let mut artifacts = Artifacts::default();
    let (report, timings, grid) = run_into(cfg, &mut artifacts)?;
    Ok(RunOutput {
        report,
        artifacts,
        timings,
        grid,
    })
}

fn control_artifacts(
    name: &str,
    r: &MinNormResult,
    weight: &Field,
    y0: &Field,
    params: &PdeParams,
    artifacts: &mut Artifacts,
) -> Result<()> {
    let state = solve_forward(y0, weight, Some(&r.control), params)?;
    artifacts
        .trajectories
        .push((format!("control_{name}"), r.control.clone()));
    artifacts
        .trajectories
        .push((format!("state_{name}"), state));
    artifacts
        .coefficients
        .push((format!("z_{name}"), r.z.clone()));
    Ok(())
}

fn tie_rule_gap(
    f: &Field,
    mask: &Field,
    cfg: &RunConfig,
    q: f64,
    y0: &Field,
    params: &PdeParams,
    reference: f64,
) -> Result<f64> {
    let alt = bathtub_max_binary(f, cfg.alpha, params.grid(), other_rule(cfg.tie_rule))?;
    if alt.optimizer == *mask {
        return Ok(0.0);
    }
    let n = solve_min_j(&alt.optimizer, q, y0, params, &cfg.dual)?.norm;
    Ok((n - reference).abs() / reference)
}

fn run_gp2(
    cfg: &RunConfig,
    params: &PdeParams,
    y0: &Field,
    artifacts: &mut Artifacts,
    clock: &mut Clock,
) -> Result<PlacementReport> {
    let grid = params.grid();
    let options = Gp2Options {
        tikhonov: cfg.dual.tikhonov,
        seed: cfg.seed,
        ..cfg.game
    };
    let gp2 = solve_gp2(y0, cfg.alpha, 2.0, params, &options).map_err(|e| e.at_stage("gp2"))?;
    artifacts.fields.push(("f_bar".into(), gp2.f_bar.clone()));
    artifacts
        .fields
        .push(("theta_eq".into(), gp2.theta.clone()));
    artifacts
        .trajectories
        .push(("psi_bar".into(), gp2.psi.clone()));
    artifacts.coefficients.push(("z_bar".into(), gp2.z.clone()));
    clock.lap("gp2");

    let ex = extract_actuator(&gp2.f_bar, cfg.alpha, grid, cfg.tie_rule)
        .map_err(|e| e.at_stage("extract"))?;
    let mask = ex.mask.optimizer.clone();
    // The equilibrium density is the relaxed actuator. The uniform tie split of
    // the extraction only sees exact ties, while on a numerically flat plateau
    // of f̄ the optimal density is fractional.
    let theta = gp2.theta.clone();
    let beta = theta.map(f64::sqrt);
    artifacts.fields.push(("mask".into(), mask.clone()));
    artifacts
        .fields
        .push(("theta_split".into(), ex.relaxed.optimizer.clone()));
    artifacts.fields.push(("beta_relaxed".into(), beta.clone()));
    clock.lap("extract");

    let on_mask =
        solve_min_j(&mask, 2.0, y0, params, &cfg.dual).map_err(|e| e.at_stage("min_norm_mask"))?;
    control_artifacts("mask", &on_mask, &mask, y0, params, artifacts)?;
    let on_beta = solve_min_j(&beta, 2.0, y0, params, &cfg.dual)
        .map_err(|e| e.at_stage("min_norm_relaxed"))?;
    control_artifacts("relaxed", &on_beta, &beta, y0, params, artifacts)?;
    let psi_gap = observed_gap(&gp2.z, &on_beta.z, &theta, params);
    clock.lap("min_norm");

    let probes = NashProbes {
        theta_probes: cfg.nash.theta_probes,
        psi_probes: cfg.nash.psi_probes,
        seed: cfg.seed,
    };
    let nash = nash_residual(
        &gp2.theta,
        &gp2.z,
        y0,
        2.0,
        params,
        cfg.dual.tikhonov,
        &probes,
    )
    .map_err(|e| e.at_stage("nash"))?;
    clock.lap("nash");

    let table = optimality_sample_test(
        &mask,
        y0,
        cfg.alpha,
        2.0,
        params,
        &cfg.dual,
        cfg.nash.samples,
        cfg.seed,
    )
    .map_err(|e| e.at_stage("sampling"))?;
    clock.lap("sampling");

    let tie_gap = tie_rule_gap(&gp2.f_bar, &mask, cfg, 2.0, y0, params, on_mask.norm)
        .map_err(|e| e.at_stage("tie_rule"))?;
    clock.lap("tie_rule");

    Ok(PlacementReport {
        orientation: ORIENTATION.into(),
        path: "gp2".into(),
        config: cfg.clone(),
        q: 2.0,
        actuator: actuator_summary(&ex.mask, false),
        mask: summarize(&on_mask, y0, grid),
        relaxed: summarize(&on_beta, y0, grid),
        game: Some(GameSummary {
            value: gp2.value,
            lower_bound: gp2.lower_bound,
            gap: gp2.gap,
            iterations: gp2.iterations,
            subgradient_norm: gp2.subgradient_norm,
            payoff: nash.value,
            r_theta: nash.r_theta,
            r_psi: nash.r_psi,
            psi_gap,
        }),
        samples: Some(SampleSummary {
            count: table.rows.len(),
            failed: table.rows.iter().filter(|r| r.error.is_some()).count(),
            violations: table.violations,
            tolerance: table.tolerance,
            min_gap: table.min_gap(),
        }),
        tie_rule_gap: tie_gap,
    })
}

fn run_relaxed(
    cfg: &RunConfig,
    params: &PdeParams,
    y0: &Field,
    artifacts: &mut Artifacts,
    clock: &mut Clock,
) -> Result<PlacementReport> {
    let grid = params.grid();
    let q = cfg.q();
    let loc = solve_relaxed_location(y0, cfg.alpha, q, params, &cfg.dual, &cfg.relaxed)
        .map_err(|e| e.at_stage("relaxed"))?;
    artifacts
        .fields
        .push(("theta_relaxed".into(), loc.theta.clone()));
    artifacts
        .fields
        .push(("beta_relaxed".into(), loc.beta.clone()));
    control_artifacts("relaxed", &loc.solve, &loc.beta, y0, params, artifacts)?;
    clock.lap("relaxed");

    let energy = aggregated_energy(&loc.theta, &loc.solve.z, y0, q, params, &cfg.dual)
        .map_err(|e| e.at_stage("extract"))?;
    artifacts.fields.push(("f_bar".into(), energy.clone()));
    let ex = bathtub_max_binary(&energy, cfg.alpha, grid, cfg.tie_rule)
        .map_err(|e| e.at_stage("extract"))?;
    let mask = ex.optimizer.clone();
    artifacts.fields.push(("mask".into(), mask.clone()));
    clock.lap("extract");

    let on_mask =
        solve_min_j(&mask, q, y0, params, &cfg.dual).map_err(|e| e.at_stage("min_norm_mask"))?;
    control_artifacts("mask", &on_mask, &mask, y0, params, artifacts)?;
    clock.lap("min_norm");

    let tie_gap = tie_rule_gap(&energy, &mask, cfg, q, y0, params, on_mask.norm)
        .map_err(|e| e.at_stage("tie_rule"))?;
    clock.lap("tie_rule");

    Ok(PlacementReport {
        orientation: ORIENTATION.into(),
        path: "relaxed".into(),
        config: cfg.clone(),
        q,
        actuator: actuator_summary(&ex, true),
        mask: summarize(&on_mask, y0, grid),
        relaxed: summarize(&loc.solve, y0, grid),
        game: None,
        samples: None,
        tie_rule_gap: tie_gap,
    })
}

/// Writes field CSVs, trajectory snapshots, coefficient vectors,
/// `report.json` and `timings.json` into `dir`. Returns the written paths.
pub fn write_outputs(
    dir: &Path,
    report: Option<&PlacementReport>,
    artifacts: &Artifacts,
    timings: Option<&Timings>,
    grid: &Grid,
    stride: usize,
) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    for (name, f) in &artifacts.fields {
        let path = dir.join(format!("{name}.csv"));
        write_field(&path, f, grid)?;
        written.push(path);
    }
    for (name, t) in &artifacts.trajectories {
        written.extend(write_trajectory(dir, name, t, grid, stride)?);
    }
    for (name, z) in &artifacts.coefficients {
        let path = dir.join(format!("{name}.json"));
        write_json(&path, z)?;
        written.push(path);
    }
    if let Some(r) = report {
        let path = dir.join("report.json");
        write_json(&path, r)?;
        written.push(path);
    }
    if let Some(t) = timings {
        let path = dir.join("timings.json");
        write_json(&path, t)?;
        written.push(path);
    }
    Ok(written)
}

/// Runs the pipeline and writes everything to `dir`. On failure the
/// artifacts of the completed stages are written before the error returns.
pub fn optimize(cfg: &RunConfig, dir: &Path) -> Result<RunOutput> {
    let mut artifacts = Artifacts::default();
    let grid = cfg.build_grid()?;
    match run_into(cfg, &mut artifacts) {
        Ok((report, timings, grid)) => {
            write_outputs(
                dir,
                Some(&report),
                &artifacts,
                Some(&timings),
                &grid,
                cfg.snapshot_stride,
            )?;
            Ok(RunOutput {
                report,
                artifacts,
                timings,
                grid,
            })
        }
        Err(e) => {
            if !artifacts.fields.is_empty() {
                write_outputs(dir, None, &artifacts, None, &grid, cfg.snapshot_stride)?;
            }
            Err(e)
        }
    }
}

/// Output directory from the command line, else the configuration.
pub fn output_dir(cfg: &RunConfig, cli: Option<&Path>) -> Result<PathBuf> {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Error::validation("output", "no output directory given"))
}
