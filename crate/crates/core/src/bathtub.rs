//! Linear rearrangement ("bathtub") problem: maximize `∫θφ` over densities
//! `θ ∈ [0,1]` of fixed mass `α·m(Ω)`.
//!
//! Optimizers fill the superlevel set above the threshold `c_φ` and split the
//! remaining mass over the level set `{φ = c_φ}`. Cells count as tied when
//! `|φ - c_φ| ≤ 1e-12·max(1, |c_φ|)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, MASS_TOL};

/// Relative tolerance deciding floating-point ties with the threshold.
pub const TIE_TOL: f64 = 1e-12;

/// Largest cell count accepted by [`bathtub_bruteforce`].
pub const BRUTEFORCE_MAX_CELLS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// Fill tied cells in increasing index order.
    #[default]
    LowestIndex,
    /// Fill tied cells from the domain center outwards, so mirror-symmetric
    /// problems keep symmetric masks.
    SymmetricPairing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub c: f64,
    /// Measure fraction of `{φ ≥ c}`.
    pub alpha_upper: f64,
    /// Measure fraction of `{φ > c}`.
    pub alpha_lower: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BathtubSolution {
    pub threshold: f64,
    pub alpha_upper: f64,
    pub alpha_lower: f64,
    pub optimizer: Field,
    pub value: f64,
    /// Cells on the threshold level set.
    pub tie_set: Vec<usize>,
    /// `(α - α̲)·m(Ω)`, the mass to be placed on the tie set.
    pub tie_mass: f64,
    /// `|Σθh - α·m(Ω)|`; nonzero only for binary masks on coarse grids.
    pub measure_defect: f64,
    /// Every cell is tied, so every feasible density is optimal.
    pub degenerate: bool,
}

struct Partition {
    threshold: Threshold,
    above: Vec<usize>,
    ties: Vec<usize>,
    /// `α·m(Ω)/h`, snapped to an integer when within rounding of one.
    target_cells: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(
            "alpha",
            format!("must lie in (0,1), got {alpha}"),
        ));
    }
    Ok(())
}

fn target_cells(alpha: f64, grid: &Grid) -> f64 {
    let t = alpha * grid.cell_count() as f64;
    let r = t.round();
    if (t - r).abs() <= 1e-9 * t.max(1.0) {
        r
    } else {
        t
    }
}

fn is_tied(v: f64, c: f64) -> bool {
    (v - c).abs() <= TIE_TOL * c.abs().max(1.0)
}

fn partition(phi: &Field, alpha: f64, grid: &Grid) -> Result<Partition> {
    check_alpha(alpha)?;
    grid.check(phi)?;
    if !phi.is_finite() {
        return Err(Error::Degenerate("field contains non-finite values".into()));
    }
    let n = phi.len();
    let target = target_cells(alpha, grid);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    let k = ((target * (1.0 - 1e-12)).ceil() as usize).clamp(1, n);
    let c = phi[order[k - 1]];
    let mut above = Vec::new();
    let mut ties = Vec::new();
    for i in 0..n {
        if is_tied(phi[i], c) {
            ties.push(i);
        } else if phi[i] > c {
            above.push(i);
        }
    }
    let frac = |count: usize| count as f64 / n as f64;
    Ok(Partition {
        threshold: Threshold {
            c,
            alpha_upper: frac(above.len() + ties.len()),
            alpha_lower: frac(above.len()),
        },
        above,
        ties,
        target_cells: target,
    })
}

/// Threshold `c_φ` with the measure fractions of `{φ ≥ c_φ}` and `{φ > c_φ}`.
pub fn bathtub_threshold(phi: &Field, alpha: f64, grid: &Grid) -> Result<Threshold> {
    Ok(partition(phi, alpha, grid)?.threshold)
}

/// `h·Σ θ_i φ_i`, summed in index order.
fn objective(theta: &Field, phi: &Field, grid: &Grid) -> f64 {
    theta
        .iter()
        .zip(phi.iter())
        .map(|(t, p)| t * p)
        .sum::<f64>()
        * grid.cell_measure()
}

fn solution(
    p: Partition,
    optimizer: Field,
    phi: &Field,
    alpha: f64,
    grid: &Grid,
) -> BathtubSolution {
    let value = objective(&optimizer, phi, grid);
    let mass = grid.integral(&optimizer);
    let target = alpha * grid.total_measure();
    let degenerate = p.above.is_empty() && p.ties.len() == phi.len();
    BathtubSolution {
        threshold: p.threshold.c,
        alpha_upper: p.threshold.alpha_upper,
        alpha_lower: p.threshold.alpha_lower,
        value,
        tie_mass: (p.target_cells - p.above.len() as f64).max(0.0) * grid.cell_measure(),
        measure_defect: (mass - target).abs(),
        tie_set: p.ties,
        optimizer,
        degenerate,
    }
}

/// Relaxed maximizer: full density above the threshold, the remaining mass
/// spread uniformly over the tie set.
pub fn bathtub_max_relaxed(phi: &Field, alpha: f64, grid: &Grid) -> Result<BathtubSolution> {
    let p = partition(phi, alpha, grid)?;
    let mut theta = Field::zeros(phi.len());
    for &i in &p.above {
        theta.values_mut()[i] = 1.0;
    }
    let share = ((p.target_cells - p.above.len() as f64) / p.ties.len() as f64).clamp(0.0, 1.0);
    for &i in &p.ties {
        theta.values_mut()[i] = share;
    }
    Ok(solution(p, theta, phi, alpha, grid))
}

/// Binary maximizer of the nearest achievable mass; tied cells are filled in
/// the order given by `tie_rule`.
pub fn bathtub_max_binary(
    phi: &Field,
    alpha: f64,
    grid: &Grid,
    tie_rule: TieRule,
) -> Result<BathtubSolution> {
    let mut p = partition(phi, alpha, grid)?;
    let cells =
        (p.target_cells.round() as usize).clamp(p.above.len(), p.above.len() + p.ties.len());
    let mut mask = Field::zeros(phi.len());
    for &i in &p.above {
        mask.values_mut()[i] = 1.0;
    }
    let mut ties = p.ties.clone();
    if tie_rule == TieRule::SymmetricPairing {
        ties.sort_by(|&a, &b| {
            grid.center_distance_sq(a)
                .total_cmp(&grid.center_distance_sq(b))
                .then(a.cmp(&b))
        });
    }
    for &i in ties.iter().take(cells - p.above.len()) {
        mask.values_mut()[i] = 1.0;
    }
    p.target_cells = cells as f64;
    Ok(solution(p, mask, phi, alpha, grid))
}

/// Whether `θ` is optimal for `φ`: full density strictly above the threshold
/// and none strictly below, within `1e-10` per cell.
pub fn in_solution_set(theta: &Field, phi: &Field, alpha: f64, grid: &Grid) -> Result<bool> {
    let p = partition(phi, alpha, grid)?;
    grid.check(theta)?;
    if let Some(v) = theta
        .iter()
        .find(|&&v| !(-MASS_TOL..=1.0 + MASS_TOL).contains(&v))
    {
        return Err(Error::Feasibility(format!(
            "density value {v} outside [0,1]"
        )));
    }
    let binary = theta.iter().all(|&v| v == 0.0 || v == 1.0);
    let slack = if binary {
        grid.cell_measure() * (1.0 + 1e-12)
    } else {
        grid.mass_tolerance()
    };
    let mass = grid.integral(theta);
    if (mass - alpha * grid.total_measure()).abs() > slack {
        return Err(Error::Feasibility(format!(
            "density mass {mass} differs from α·m(Ω) = {}",
            alpha * grid.total_measure()
        )));
    }
    let c = p.threshold.c;
    Ok(theta.iter().zip(phi.iter()).all(|(&t, &v)| {
        if is_tied(v, c) {
            true
        } else if v > c {
            t >= 1.0 - 1e-10
        } else {
            t <= 1e-10
        }
    }))
}

/// Exhaustive maximum of `∫χ_ωφ` over binary masks of mass `α·m(Ω)`, or of
/// the nearest achievable mass when that is not a whole number of cells.
pub fn bathtub_bruteforce(phi: &Field, alpha: f64, grid: &Grid) -> Result<f64> {
    check_alpha(alpha)?;
    grid.check(phi)?;
    let n = phi.len();
    if n > BRUTEFORCE_MAX_CELLS {
        return Err(Error::OracleScope(format!(
            "{n} cells exceed the enumeration limit of {BRUTEFORCE_MAX_CELLS}"
        )));
    }
    // nearest achievable mass, as for the binary maximizer
    let k = target_cells(alpha, grid).round() as u32;
    let mut best = f64::NEG_INFINITY;
    for bits in 0u32..(1u32 << n) {
        if bits.count_ones() != k {
            continue;
        }
        let s: f64 = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| phi[i]).sum();
        best = best.max(s * grid.cell_measure());
    }
    Ok(best)
}
