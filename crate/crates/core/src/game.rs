//! Placement game between a density player `θ ∈ Θ` and an adjoint player `ψ`.
//!
//! All values here use the minimizing orientation
//!
//! `payoff(θ, z) = ½‖√θ ψ(·;z)‖²_{L^q(0,T;L²)} + ⟨y0, ψ(0;z)⟩ + ε‖z‖²`,
//!
//! which the adjoint player minimizes and the density player maximizes. For
//! `q = 2` the sup over `θ` is a bathtub problem on `G_ψ = ∫ψ²dt`, which
//! gives the reduced objective `Φ(z)` minimized by [`solve_gp2`]. The density
//! game value equals `-½N₂²` at the optimal relaxed location.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bathtub::{
    bathtub_max_binary, bathtub_max_relaxed, in_solution_set, BathtubSolution, TieRule,
};
use crate::dual::{
    conjugate_exponent, solve_min_j, solve_min_j_from, DualCoefficients, DualObjective,
    DualSolveOptions, MinNormResult,
};
use crate::error::{Error, Result};
use crate::grid::{project_to_class, DensityClass, DensityClassSpec, Field, Grid, MASS_TOL};
use crate::heat::{solve_backward, PdeParams, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Gp2StepRule {
    /// Step length `s0/k` along the normalized subgradient.
    Diminishing,
    /// Polyak steps towards the best certified lower bound.
    #[default]
    Polyak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gp2Options {
    /// Subgradient iterations per restart.
    pub max_iterations: usize,
    pub step_rule: Gp2StepRule,
    /// Initial width of the quadratic smoothing of the tie set, as a fraction
    /// of the spread of `G_ψ`; reduced tenfold per refinement stage.
    pub smoothing: f64,
    /// Newton iterations per smoothing stage.
    pub newton_iterations: usize,
    /// Target relative duality gap.
    pub tolerance: f64,
    /// Largest relative duality gap accepted as converged.
    pub acceptable_gap: f64,
    pub restarts: usize,
    /// Taken from the dual solver options when run from a configuration.
    #[serde(skip)]
    pub tikhonov: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Gp2Options {
    fn default() -> Self {
        Gp2Options {
            max_iterations: 300,
            step_rule: Gp2StepRule::Polyak,
            smoothing: 0.5,
            newton_iterations: 60,
            tolerance: 1e-11,
            acceptable_gap: 1e-6,
            restarts: 3,
            tikhonov: 1e-8,
            seed: 0,
        }
    }
}

impl Gp2Options {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("smoothing", self.smoothing),
            ("tolerance", self.tolerance),
            ("acceptable_gap", self.acceptable_gap),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if !(self.tikhonov >= 0.0 && self.tikhonov.is_finite()) {
            return Err(Error::validation(
                "tikhonov",
                "must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Gp2Solution {
    pub z: DualCoefficients,
    pub psi: Trajectory,
    /// `f̄ = G_ψ̄`.
    pub f_bar: Field,
    /// Equilibrium density paired with `ψ̄`.
    pub theta: Field,
    /// `Φ(z̄)`, an upper bound on the game value.
    pub value: f64,
    /// `min_z payoff(θ̄, z)`, a lower bound on the game value.
    pub lower_bound: f64,
    /// `(value - lower_bound)/|value|`.
    pub gap: f64,
    /// Best objective value after each iteration (nonincreasing).
    pub history: Vec<f64>,
    pub subgradient_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NashProbes {
    pub theta_probes: usize,
    pub psi_probes: usize,
    pub seed: u64,
}

impl Default for NashProbes {
    fn default() -> Self {
        NashProbes {
            theta_probes: 200,
            psi_probes: 60,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NashResiduals {
    /// Best payoff gain of the density player over `θ̄`.
    pub r_theta: f64,
    /// Best payoff decrease of the adjoint player below `ψ̄`.
    pub r_psi: f64,
    /// `payoff(θ̄, ψ̄)`.
    pub value: f64,
}

/// Everything the equilibrium stage produces.
#[derive(Debug, Clone)]
pub struct NashReport {
    pub theta: Field,
    pub psi: DualCoefficients,
    pub psi_trajectory: Trajectory,
    pub f_bar: Field,
    pub threshold: f64,
    pub mask: Field,
    pub residuals: NashResiduals,
    pub samples: SampleTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub norm: Option<f64>,
    /// `N_p(sample) - N_p(ω̄)`.
    pub gap: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTable {
    pub reference_norm: f64,
    pub tolerance: f64,
    pub rows: Vec<SampleRow>,
    /// Samples beating the reference by more than the tolerance.
    pub violations: usize,
}

impl SampleTable {
    pub fn min_gap(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.gap)
            .min_by(|a, b| a.total_cmp(b))
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub mask: BathtubSolution,
    pub relaxed: BathtubSolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxedOptions {
    pub max_iterations: usize,
    /// Stop when the ascent gap falls below this fraction of the value.
    pub tolerance: f64,
    /// Iterations without improvement of the best gap before giving up.
    pub patience: usize,
    /// For q < 2: stop once `N_p` fell by less than `tolerance` (relative)
    /// over this many accepted steps.
    pub window: usize,
}

impl Default for RelaxedOptions {
    fn default() -> Self {
        RelaxedOptions {
            max_iterations: 20_000,
            tolerance: 1e-6,
            patience: 2_000,
            window: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RelaxedLocation {
    pub beta: Field,
    pub theta: Field,
    /// `N_p(β̄)` from a final minimum-norm solve.
    pub norm: f64,
    pub solve: MinNormResult,
    /// Minimal-norm estimate after each accepted ascent step (nonincreasing).
    pub history: Vec<f64>,
    /// Final ascent gap relative to the value.
    pub gap: f64,
    pub iterations: usize,
}

fn check_q(q: f64) -> Result<()> {
    if !(1.0..=2.0).contains(&q) {
        return Err(Error::Unsupported(format!(
            "time exponent q = {q} outside [1, 2]"
        )));
    }
    Ok(())
}

fn check_density(theta: &Field, grid: &Grid) -> Result<()> {
    grid.check(theta)?;
    if let Some(v) = theta
        .iter()
        .find(|&&v| !(-MASS_TOL..=1.0 + MASS_TOL).contains(&v))
    {
        return Err(Error::Feasibility(format!(
            "density value {v} outside [0,1]"
        )));
    }
    Ok(())
}

/// `F(θ, ψ) = -½‖√θψ‖²_{L^q L²} - ⟨y0, ψ(0)⟩`.
pub fn f_eval(theta: &Field, psi: &Trajectory, q: f64, y0: &Field, grid: &Grid) -> Result<f64> {
    check_q(q)?;
    check_density(theta, grid)?;
    grid.check(y0)?;
    if psi.cell_count() != grid.cell_count() {
        return Err(Error::ShapeMismatch("trajectory and grid differ".into()));
    }
    let sq = SquaredAdjoint::from_trajectory(psi);
    let n = sq.weighted_norm(theta, q, grid.cell_measure());
    Ok(-0.5 * n * n - grid.inner(y0, psi.initial()))
}

/// `∫₀ᵀ ψ̄ ψ dt` per cell, trapezoid rule.
pub fn cross_energy_field(psi_bar: &Trajectory, psi: &Trajectory) -> Result<Field> {
    if psi_bar.nodes() != psi.nodes() || psi_bar.cell_count() != psi.cell_count() {
        return Err(Error::ShapeMismatch("trajectories differ in shape".into()));
    }
    if (psi_bar.dt() - psi.dt()).abs() > 1e-15 * psi.dt() {
        return Err(Error::ShapeMismatch(
            "trajectories use different time steps".into(),
        ));
    }
    let w = psi.quadrature_weights();
    let mut out = vec![0.0; psi.cell_count()];
    for (j, wj) in w.iter().enumerate() {
        for ((o, a), b) in out
            .iter_mut()
            .zip(psi_bar.field(j).iter())
            .zip(psi.field(j).iter())
        {
            *o += wj * a * b;
        }
    }
    Ok(Field::new(out))
}

/// Squared adjoint values `ψ_j(x_i)²` with their time weights.
struct SquaredAdjoint {
    /// cells × nodes
    sq: DMatrix<f64>,
    weights: Vec<f64>,
}

impl SquaredAdjoint {
    fn from_trajectory(psi: &Trajectory) -> Self {
        let mut sq = DMatrix::zeros(psi.cell_count(), psi.nodes());
        for (j, f) in psi.fields().iter().enumerate() {
            for (i, v) in f.iter().enumerate() {
                sq[(i, j)] = v * v;
            }
        }
        SquaredAdjoint {
            sq,
            weights: psi.quadrature_weights(),
        }
    }

    fn slice_norms(&self, theta: &Field, h: f64) -> Vec<f64> {
        let t = DVector::from_column_slice(theta.values());
        (self.sq.tr_mul(&t) * h)
            .iter()
            .map(|s| s.max(0.0).sqrt())
            .collect()
    }

    fn weighted_norm(&self, theta: &Field, q: f64, h: f64) -> f64 {
        crate::heat::lp_of_norms(&self.slice_norms(theta, h), &self.weights, q)
    }

    /// `I^{2/q-1} Σ_j w_j n_j^{q-2} ψ_j²`, the density gradient of the
    /// squared norm divided by `h`.
    fn sensitivity(&self, theta: &Field, q: f64, h: f64) -> Field {
        let n = self.slice_norms(theta, h);
        let integral: f64 = n
            .iter()
            .zip(&self.weights)
            .map(|(nj, w)| w * nj.powf(q))
            .sum();
        let lead = if integral > 0.0 {
            integral.powf(2.0 / q - 1.0)
        } else {
            0.0
        };
        let coef: Vec<f64> = n
            .iter()
            .zip(&self.weights)
            .map(|(&nj, &w)| {
                if q == 2.0 {
                    w
                } else if nj > 0.0 {
                    w * lead * nj.powf(q - 2.0)
                } else {
                    0.0
                }
            })
            .collect();
        Field::new(
            (&self.sq * DVector::from_vec(coef))
                .iter()
                .copied()
                .collect(),
        )
    }
}

/// Maximizes the θ-weighted squared norm over `Θ`; returns the maximizer and
/// the squared norm.
fn nf_argmax(sq: &SquaredAdjoint, q: f64, alpha: f64, grid: &Grid) -> Result<(Field, f64)> {
    let h = grid.cell_measure();
    if q == 2.0 {
        let s = bathtub_max_relaxed(
            &sq.sensitivity(&Field::zeros(grid.cell_count()), 2.0, h),
            alpha,
            grid,
        )?;
        return Ok((s.optimizer, s.value));
    }
    // damped fixed point: bathtub step on the current time aggregate
    let mut theta = Field::constant(grid.cell_count(), alpha);
    let mut value = sq.weighted_norm(&theta, q, h).powi(2);
    let mut eta = 0.5;
    for _ in 0..10_000 {
        let target = bathtub_max_relaxed(&sq.sensitivity(&theta, q, h), alpha, grid)?.optimizer;
        let mut improved = false;
        while eta >= 1e-6 {
            let trial = theta.zip_map(&target, |a, b| (1.0 - eta) * a + eta * b);
            let v = sq.weighted_norm(&trial, q, h).powi(2);
            if v > value {
                let gain = v - value;
                theta = trial;
                value = v;
                improved = gain >= 1e-10 * value.max(f64::MIN_POSITIVE);
                break;
            }
            eta *= 0.5;
        }
        if !improved {
            break;
        }
        eta = (eta * 2.0).min(0.5);
    }
    Ok((theta, value))
}

/// `sup_{θ∈Θ} ‖√θψ‖_{L^q(0,T;L²)}`.
pub fn nf_norm(psi: &Trajectory, q: f64, alpha: f64, grid: &Grid) -> Result<f64> {
    check_q(q)?;
    DensityClassSpec::new(alpha, DensityClass::Density)?;
    if psi.cell_count() != grid.cell_count() {
        return Err(Error::ShapeMismatch("trajectory and grid differ".into()));
    }
    let sq = SquaredAdjoint::from_trajectory(psi);
    Ok(nf_argmax(&sq, q, alpha, grid)?.1.max(0.0).sqrt())
}

/// Time-aggregated adjoint energy `I^{2/q-1} Σ_j w_j n_j^{q-2} ψ_j²` of
/// `ψ = φ(·;z)` weighted by `θ`; equals `G_ψ` for `q = 2`.
pub fn aggregated_energy(
    theta: &Field,
    z: &DualCoefficients,
    y0: &Field,
    q: f64,
    params: &PdeParams,
    dual: &DualSolveOptions,
) -> Result<Field> {
    check_q(q)?;
    check_density(theta, params.grid())?;
    if z.len() != params.modes() {
        return Err(Error::ShapeMismatch(
            "dual coefficients do not match the basis".into(),
        ));
    }
    Ok(DualObjective::new(params, theta, y0, q, dual).density_sensitivity(z.as_vector()))
}

/// Reduced game in coefficient space for `q = 2`.
struct Game<'a> {
    params: &'a PdeParams,
    b: DVector<f64>,
    eps: f64,
    alpha: f64,
}

struct Bound {
    z: DVector<f64>,
    value: f64,
}

impl<'a> Game<'a> {
    fn new(params: &'a PdeParams, y0: &Field, alpha: f64, eps: f64) -> Self {
        Game {
            params,
            b: params.propagate(&params.basis().project(y0)),
            eps,
            alpha,
        }
    }

    fn h(&self) -> f64 {
        self.params.grid().cell_measure()
    }

    fn energy(&self, z: &DVector<f64>) -> Field {
        self.params.energy_field(z)
    }

    fn linear(&self, z: &DVector<f64>) -> f64 {
        self.b.dot(z) + self.eps * z.norm_squared()
    }

    /// `Φ(z)` with the relaxed bathtub maximizer of `G_ψ`.
    fn phi(&self, z: &DVector<f64>) -> Result<(f64, BathtubSolution)> {
        let s = bathtub_max_relaxed(&self.energy(z), self.alpha, self.params.grid())?;
        Ok((0.5 * s.value + self.linear(z), s))
    }

    fn payoff(&self, theta: &Field, z: &DVector<f64>) -> f64 {
        let f = self.energy(z);
        let quad: f64 = theta.iter().zip(f.iter()).map(|(t, v)| t * v).sum::<f64>() * self.h();
        0.5 * quad + self.linear(z)
    }

    fn system(&self, theta: &Field) -> DMatrix<f64> {
        let mut a = self.params.gramian(theta);
        for k in 0..a.nrows() {
            a[(k, k)] += 2.0 * self.eps;
        }
        a
    }

    /// `min_z payoff(θ, z)` by dense factorization.
    fn best_response(&self, theta: &Field) -> Result<Bound> {
        let a = self.system(theta);
        let chol = Cholesky::new(a)
            .ok_or_else(|| Error::Degenerate("weighted Gramian is not positive definite".into()))?;
        let z = chol.solve(&(-&self.b));
        let value = self.payoff(theta, &z);
        Ok(Bound { z, value })
    }

    fn subgradient(&self, theta: &Field, z: &DVector<f64>) -> DVector<f64> {
        self.system(theta) * z + &self.b
    }
}

/// `Φ(z) = ½·sup_θ ∫θG_ψ + ⟨y0, ψ(0)⟩ + ε‖z‖²` for `ψ = φ(·;z)`.
pub fn gp2_objective(
    z: &DualCoefficients,
    y0: &Field,
    alpha: f64,
    params: &PdeParams,
    tikhonov: f64,
) -> Result<f64> {
    DensityClassSpec::new(alpha, DensityClass::Density)?;
    params.grid().check(y0)?;
    let game = Game::new(params, y0, alpha, tikhonov);
    Ok(game.phi(z.as_vector())?.0)
}

/// Subgradient of [`gp2_objective`] built from the bathtub maximizer.
pub fn gp2_subgradient(
    z: &DualCoefficients,
    y0: &Field,
    alpha: f64,
    params: &PdeParams,
    tikhonov: f64,
) -> Result<DualCoefficients> {
    DensityClassSpec::new(alpha, DensityClass::Density)?;
    params.grid().check(y0)?;
    let game = Game::new(params, y0, alpha, tikhonov);
    let (_, s) = game.phi(z.as_vector())?;
    Ok(DualCoefficients::from_vector(
        game.subgradient(&s.optimizer, z.as_vector()),
    ))
}

struct Branch {
    z: DVector<f64>,
    value: f64,
    history: Vec<f64>,
    lower: f64,
}

fn subgradient_phase(
    game: &Game<'_>,
    start: DVector<f64>,
    lower: f64,
    options: &Gp2Options,
) -> Result<Branch> {
    let mut z = start;
    let mut best_z = z.clone();
    let mut best = f64::INFINITY;
    let mut lower = lower;
    let mut history = Vec::with_capacity(options.max_iterations + 1);
    let s0 = 0.1 * z.norm().max(1.0);
    for k in 0..=options.max_iterations {
        let (value, s) = game.phi(&z)?;
        if value < best {
            best = value;
            best_z = z.clone();
        }
        history.push(best);
        if k == options.max_iterations {
            break;
        }
        if let Ok(bound) = game.best_response(&s.optimizer) {
            lower = lower.max(bound.value);
        }
        if best - lower <= options.tolerance * best.abs() {
            break;
        }
        let g = game.subgradient(&s.optimizer, &z);
        let gg = g.norm_squared();
        if gg == 0.0 {
            break;
        }
        let step = match options.step_rule {
            Gp2StepRule::Polyak => (value - lower).max(0.0) / gg,
            Gp2StepRule::Diminishing => s0 / ((k + 1) as f64 * gg.sqrt()),
        };
        z.axpy(-step, &g, 1.0);
    }
    Ok(Branch {
        z: best_z,
        value: best,
        history,
        lower,
    })
}

/// Densities maximizing `Σθ(g - μθ/2)` over `Θ`, with `g = G_ψ/2`.
fn waterfill(g: &[f64], mu: f64, target: f64) -> Vec<f64> {
    let theta_at = |lambda: f64| -> Vec<f64> {
        g.iter()
            .map(|&gi| ((gi - lambda) / mu).clamp(0.0, 1.0))
            .collect()
    };
    let mass = |lambda: f64| -> f64 {
        g.iter()
            .map(|&gi| ((gi - lambda) / mu).clamp(0.0, 1.0))
            .sum()
    };
    let mut bps: Vec<f64> = g.iter().flat_map(|&gi| [gi - mu, gi]).collect();
    bps.sort_by(|a, b| a.total_cmp(b));
    // largest breakpoint index with mass ≥ target
    let (mut lo, mut hi) = (0usize, bps.len() - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if mass(bps[mid]) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (bps[lo], bps[hi]);
    let m = 0.5 * (a + b);
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let mut saturated = 0usize;
    for &gi in g {
        if gi - mu >= m {
            saturated += 1;
        } else if gi > m {
            free += 1;
            free_sum += gi;
        }
    }
    let lambda = if free > 0 {
        ((free_sum - mu * (target - saturated as f64)) / free as f64).clamp(a, b)
    } else {
        m
    };
    theta_at(lambda)
}

struct Smoothed<'a, 'b> {
    game: &'b Game<'a>,
    mu: f64,
    target: f64,
}

impl Smoothed<'_, '_> {
    fn theta(&self, f: &Field) -> Field {
        let g: Vec<f64> = f.iter().map(|v| 0.5 * v).collect();
        Field::new(waterfill(&g, self.mu, self.target))
    }

    fn value(&self, z: &DVector<f64>) -> (f64, Field) {
        let f = self.game.energy(z);
        let theta = self.theta(&f);
        let h = self.game.h();
        let inner: f64 = theta
            .iter()
            .zip(f.iter())
            .map(|(t, v)| t * (0.5 * v - 0.5 * self.mu * t))
            .sum::<f64>()
            * h;
        (inner + self.game.linear(z), theta)
    }

    fn newton_system(&self, z: &DVector<f64>, theta: &Field) -> (DMatrix<f64>, DVector<f64>) {
        let game = self.game;
        let hm = game.system(theta);
        let grad = &hm * z + &game.b;
        let free: Vec<usize> = (0..theta.len())
            .filter(|&i| theta[i] > 0.0 && theta[i] < 1.0)
            .collect();
        let mut hess = hm;
        if !free.is_empty() {
            let cells = game.params.cell_gramians();
            let a: Vec<DVector<f64>> = free.iter().map(|&i| &cells[i] * z).collect();
            let mean = a.iter().fold(DVector::zeros(z.len()), |acc, v| acc + v) / a.len() as f64;
            let scale = game.h() / self.mu;
            for v in &a {
                let d = v - &mean;
                hess.ger(scale, &d, &d, 1.0);
            }
        }
        (hess, grad)
    }
}

/// Minimizes the reduced objective `Φ` over the dual coefficients.
pub fn solve_gp2(
    y0: &Field,
    alpha: f64,
    q: f64,
    params: &PdeParams,
    options: &Gp2Options,
) -> Result<Gp2Solution> {
    check_q(q)?;
    if q != 2.0 {
        return Err(Error::Unsupported(
            "the reduced game is solved directly only for q = 2; use the relaxed location solver"
                .into(),
        ));
    }
    options.validate()?;
    let grid = params.grid();
    grid.check(y0)?;
    DensityClassSpec::new(alpha, DensityClass::Density)?;
    if grid.norm(y0) == 0.0 {
        return Err(Error::precondition("gp2", "initial state is zero"));
    }
    let game = Game::new(params, y0, alpha, options.tikhonov);
    if game.b.norm() == 0.0 {
        return Err(Error::precondition(
            "gp2",
            "initial state has no component in the retained modes",
        ));
    }

    let uniform = Field::constant(grid.cell_count(), alpha);
    let start = game.best_response(&uniform)?;
    let z0 = start.z.clone();
    let restarts = options.restarts.max(1);
    let branches: Vec<Result<Branch>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let init = if r == 0 {
                z0.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
                rng.set_stream(r as u64);
                z0.map(|v| v * rng.gen_range(0.5..1.5))
            };
            subgradient_phase(&game, init, start.value, options)
        })
        .collect();
    let mut best: Option<Branch> = None;
    for b in branches {
        let b = b?;
        if best.as_ref().is_none_or(|cur| b.value < cur.value) {
            best = Some(b);
        }
    }
    let branch = best.expect("at least one branch");
    let mut history = branch.history;
    let mut iterations = history.len();

    // best certified pair (z, θ) by relative duality gap
    let mut pair_z = branch.z.clone();
    let (mut upper, s) = game.phi(&pair_z)?;
    let mut pair_theta = s.optimizer;
    let mut lower = branch.lower.max(
        game.best_response(&pair_theta)
            .map(|b| b.value)
            .unwrap_or(f64::NEG_INFINITY),
    );
    let rel = |u: f64, l: f64| (u - l) / u.abs().max(f64::MIN_POSITIVE);

    let consider = |z: &DVector<f64>,
                    theta: &Field,
                    upper_z: f64,
                    pair_z: &mut DVector<f64>,
                    pair_theta: &mut Field,
                    upper: &mut f64,
                    lower: &mut f64|
     -> Result<()> {
        if let Ok(bound) = game.best_response(theta) {
            if rel(upper_z, bound.value) < rel(*upper, *lower) {
                *pair_z = z.clone();
                *pair_theta = theta.clone();
                *upper = upper_z;
                *lower = bound.value;
            }
            let (ub, _) = game.phi(&bound.z)?;
            if rel(ub, bound.value) < rel(*upper, *lower) {
                *pair_z = bound.z.clone();
                *pair_theta = theta.clone();
                *upper = ub;
                *lower = bound.value;
            }
        }
        Ok(())
    };

    let target = alpha * grid.cell_count() as f64;
    let mut z = branch.z;
    let f0 = game.energy(&z);
    let spread = f0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - f0.iter().copied().fold(f64::INFINITY, f64::min);
    let fmax = f0.iter().copied().fold(0.0, f64::max);
    let mut mu = options.smoothing * spread.max(f64::MIN_POSITIVE);
    let mut best_value = *history.last().unwrap_or(&upper);
    while rel(upper, lower) > options.tolerance && mu > 1e-14 * fmax {
        let sm = Smoothed {
            game: &game,
            mu,
            target,
        };
        for _ in 0..options.newton_iterations {
            let (val, theta) = sm.value(&z);
            let (hess, grad) = sm.newton_system(&z, &theta);
            let Some(chol) = Cholesky::new(hess) else {
                break;
            };
            let d = chol.solve(&(-&grad));
            let slope = grad.dot(&d);
            if !(slope < 0.0) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial = &z + &d * t;
                if sm.value(&trial).0 <= val + 1e-4 * t * slope {
                    z = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            iterations += 1;
            let (phi_z, _) = game.phi(&z)?;
            best_value = best_value.min(phi_z);
            history.push(best_value);
            let (_, theta_new) = sm.value(&z);
            consider(
                &z,
                &theta_new,
                phi_z,
                &mut pair_z,
                &mut pair_theta,
                &mut upper,
                &mut lower,
            )?;
            if !accepted || -slope <= 1e-15 * val.abs() || rel(upper, lower) <= options.tolerance {
                break;
            }
        }
        mu *= 0.1;
    }

    let gap = rel(upper, lower);
    if !(gap <= options.acceptable_gap) {
        let tail = history.iter().rev().take(8).rev().copied().collect();
        return Err(Error::NonConvergence {
            stage: "gp2".into(),
            iterations,
            message: format!(
                "relative duality gap {gap:.3e} above {:.3e}",
                options.acceptable_gap
            ),
            residuals: tail,
        });
    }
    let (_, s) = game.phi(&pair_z)?;
    let subgradient_norm = game.subgradient(&s.optimizer, &pair_z).norm();
    let zc = DualCoefficients::from_vector(pair_z.clone());
    let psi = solve_backward(&zc, params)?;
    if let Some(last) = history.last_mut() {
        *last = last.min(upper);
    }
    Ok(Gp2Solution {
        f_bar: game.energy(&pair_z),
        psi,
        z: zc,
        theta: pair_theta,
        value: upper,
        lower_bound: lower,
        gap,
        history,
        subgradient_norm,
        iterations,
    })
}

/// Binary and relaxed actuators from the superlevel sets of `f̄`.
pub fn extract_actuator(
    f_bar: &Field,
    alpha: f64,
    grid: &Grid,
    tie_rule: TieRule,
) -> Result<Extraction> {
    grid.check(f_bar)?;
    let scale = f_bar.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(v) = f_bar.iter().find(|&&v| v < -1e-12 * scale.max(1.0)) {
        return Err(Error::precondition(
            "extract",
            format!("energy field has negative value {v}"),
        ));
    }
    let mask = bathtub_max_binary(f_bar, alpha, grid, tie_rule)?;
    let relaxed = bathtub_max_relaxed(f_bar, alpha, grid)?;
    for (name, s) in [("binary", &mask), ("relaxed", &relaxed)] {
        if !in_solution_set(&s.optimizer, f_bar, alpha, grid)? {
            return Err(Error::Degenerate(format!(
                "{name} actuator violates the optimality conditions"
            )));
        }
    }
    Ok(Extraction { mask, relaxed })
}

fn random_density(rng: &mut ChaCha8Rng, spec: &DensityClassSpec, grid: &Grid) -> Result<Field> {
    let raw = Field::new((0..grid.cell_count()).map(|_| rng.gen::<f64>()).collect());
    let mass = grid.integral(&raw);
    let scaled = raw.scale(spec.target_mass(grid) / mass);
    project_to_class(&scaled, spec, grid)
}

/// One-sided equilibrium residuals of `(θ̄, ψ̄)` against random and
/// structured probes.
pub fn nash_residual(
    theta: &Field,
    psi: &DualCoefficients,
    y0: &Field,
    q: f64,
    params: &PdeParams,
    tikhonov: f64,
    probes: &NashProbes,
) -> Result<NashResiduals> {
    check_q(q)?;
    let grid = params.grid();
    check_density(theta, grid)?;
    grid.check(y0)?;
    if psi.len() != params.modes() {
        return Err(Error::ShapeMismatch(
            "dual coefficients do not match the basis".into(),
        ));
    }
    let alpha = grid.integral(theta) / grid.total_measure();
    let spec = DensityClassSpec::new(alpha, DensityClass::Density)?;
    let opts = DualSolveOptions {
        tikhonov,
        ..Default::default()
    };
    let z = psi.as_vector();
    let payoff = |th: &Field, zz: &DVector<f64>| -> f64 {
        DualObjective::new(params, th, y0, q, &opts)
            .evaluate(zz, false)
            .exact
            + tikhonov * zz.norm_squared()
    };
    let value = payoff(theta, z);

    let mut rng = ChaCha8Rng::seed_from_u64(probes.seed);
    let mut r_theta = f64::NEG_INFINITY;
    for _ in 0..probes.theta_probes {
        let th = random_density(&mut rng, &spec, grid)?;
        r_theta = r_theta.max(payoff(&th, z) - value);
    }
    let sq = SquaredAdjoint::from_trajectory(&solve_backward(psi, params)?);
    let (best_theta, _) = nf_argmax(&sq, q, alpha, grid)?;
    r_theta = r_theta.max(payoff(&best_theta, z) - value);

    let mut r_psi = f64::NEG_INFINITY;
    let m = params.modes();
    let zn = z.norm().max(f64::MIN_POSITIVE);
    let per_direction = 6;
    let directions = probes.psi_probes.div_ceil(per_direction);
    let mut rng = ChaCha8Rng::seed_from_u64(probes.seed);
    rng.set_stream(1);
    let mut used = 0;
    for d in 0..directions {
        let dir = if d < directions / 2 {
            DualCoefficients::unit(m, d % m).into_vector()
        } else {
            let v = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let n = v.norm();
            v / n
        };
        for mag in [1e-3, 1e-2, 1e-1] {
            for sign in [1.0, -1.0] {
                if used == probes.psi_probes {
                    break;
                }
                used += 1;
                let trial = z + &dir * (sign * mag * zn);
                r_psi = r_psi.max(value - payoff(theta, &trial));
            }
        }
    }
    Ok(NashResiduals {
        r_theta: r_theta.max(-1e-9),
        r_psi: r_psi.max(-1e-9),
        value,
    })
}

/// Compares `N_p(ω̄)` with `N_p` of random masks of the same mass.
#[allow(clippy::too_many_arguments)]
pub fn optimality_sample_test(
    mask: &Field,
    y0: &Field,
    alpha: f64,
    p: f64,
    params: &PdeParams,
    options: &DualSolveOptions,
    n_samples: usize,
    seed: u64,
) -> Result<SampleTable> {
    let grid = params.grid();
    let q = conjugate_exponent(p)?;
    DensityClassSpec::new(alpha, DensityClass::Binary)?.check(mask, grid)?;
    let reference_norm = solve_min_j(mask, q, y0, params, options)?.norm;
    let tolerance = 1e-6 * reference_norm;
    let ones = mask.iter().filter(|&&v| v == 1.0).count();
    let n = grid.cell_count();
    let rows: Vec<SampleRow> = (0..n_samples)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64 + 1);
            let mut cells: Vec<usize> = (0..n).collect();
            for i in 0..ones {
                let j = rng.gen_range(i..n);
                cells.swap(i, j);
            }
            let mut sample = Field::zeros(n);
            for &c in &cells[..ones] {
                sample.values_mut()[c] = 1.0;
            }
            match solve_min_j(&sample, q, y0, params, options) {
                Ok(r) => SampleRow {
                    index,
                    norm: Some(r.norm),
                    gap: Some(r.norm - reference_norm),
                    error: None,
                },
                Err(e) => SampleRow {
                    index,
                    norm: None,
                    gap: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let violations = rows
        .iter()
        .filter(|r| r.gap.is_some_and(|g| g < -tolerance))
        .count();
    Ok(SampleTable {
        reference_norm,
        tolerance,
        rows,
        violations,
    })
}

/// Alternating ascent on the density: inner minimum-norm solve, then a damped
/// bathtub step on the density sensitivity of the dual energy.
pub fn solve_relaxed_location(
    y0: &Field,
    alpha: f64,
    q: f64,
    params: &PdeParams,
    dual: &DualSolveOptions,
    options: &RelaxedOptions,
) -> Result<RelaxedLocation> {
    check_q(q)?;
    dual.validate()?;
    let grid = params.grid();
    grid.check(y0)?;
    DensityClassSpec::new(alpha, DensityClass::Density)?;
    if grid.norm(y0) == 0.0 {
        return Err(Error::precondition("relaxed", "initial state is zero"));
    }
    let (theta, history, gap, iterations, warm) = if q == 2.0 {
        ascend_quadratic(y0, alpha, params, dual, options)?
    } else {
        ascend_general(y0, alpha, q, params, dual, options)?
    };
    let beta = theta.map(f64::sqrt);
    let start = warm.map(DualCoefficients::from_vector);
    let solve = solve_min_j_from(&beta, q, y0, params, dual, start.as_ref())?;
    Ok(RelaxedLocation {
        norm: solve.norm,
        beta,
        theta,
        solve,
        history,
        gap,
        iterations,
    })
}

type Ascent = (Field, Vec<f64>, f64, usize, Option<DVector<f64>>);

fn ascend_quadratic(
    y0: &Field,
    alpha: f64,
    params: &PdeParams,
    dual: &DualSolveOptions,
    options: &RelaxedOptions,
) -> Result<Ascent> {
    let grid = params.grid();
    let game = Game::new(params, y0, alpha, dual.tikhonov);
    let mut theta = Field::constant(grid.cell_count(), alpha);
    let mut g_theta = game.system(&theta);
    let mut history = Vec::new();
    let mut best_gap = f64::INFINITY;
    let mut since_best = 0;
    let mut gap = f64::INFINITY;
    let mut it = 0;
    let factor = |a: &DMatrix<f64>| -> Result<DVector<f64>> {
        Cholesky::new(a.clone())
            .map(|c| c.solve(&(-&game.b)))
            .ok_or_else(|| Error::Degenerate("weighted Gramian is not positive definite".into()))
    };
    while it < options.max_iterations {
        let z = factor(&g_theta)?;
        let value = 0.5 * z.dot(&(&g_theta * &z)) + game.b.dot(&z);
        history.push((-2.0 * value).max(0.0).sqrt());
        let f = game.energy(&z);
        let s = bathtub_max_relaxed(&f, alpha, grid)?;
        let current: f64 =
            theta.iter().zip(f.iter()).map(|(t, v)| t * v).sum::<f64>() * grid.cell_measure();
        gap = 0.5 * (s.value - current) / value.abs();
        if gap < best_gap {
            best_gap = gap;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if gap <= options.tolerance || since_best > options.patience {
            break;
        }
        let mut d = game.system(&s.optimizer);
        d -= &g_theta;
        // exact line search: the derivative ½zᵀDz of the concave value in η
        let slope = |eta: f64| -> Result<f64> {
            let zz = factor(&(&g_theta + &d * eta))?;
            Ok(0.5 * zz.dot(&(&d * &zz)))
        };
        let eta = if slope(1.0)? >= 0.0 {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if slope(mid)? > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        theta = theta.zip_map(&s.optimizer, |a, b| (1.0 - eta) * a + eta * b);
        g_theta += &d * eta;
        it += 1;
    }
    monotone(&mut history);
    Ok((theta, history, gap, it, None))
}

fn ascend_general(
    y0: &Field,
    alpha: f64,
    q: f64,
    params: &PdeParams,
    dual: &DualSolveOptions,
    options: &RelaxedOptions,
) -> Result<Ascent> {
    let grid = params.grid();
    let h = grid.cell_measure();
    let mut theta = Field::constant(grid.cell_count(), alpha);
    let obj = DualObjective::new(params, &theta, y0, q, dual);
    let (mut z, mut value) = obj.minimize(&theta, dual, DVector::zeros(params.modes()))?;
    let mut history = vec![(-2.0 * value).max(0.0).sqrt()];
    let mut gap = f64::INFINITY;
    let mut it = 0;
    let mut eta: f64 = 0.5;
    while it < options.max_iterations {
        if history.len() > options.window {
            let old = history[history.len() - 1 - options.window];
            if (old - history[history.len() - 1]) <= options.tolerance * old {
                break;
            }
        }
        let obj = DualObjective::new(params, &theta, y0, q, dual);
        let sens = obj.density_sensitivity(&z);
        let s = bathtub_max_relaxed(&sens, alpha, grid)?;
        let current: f64 = theta
            .iter()
            .zip(sens.iter())
            .map(|(t, v)| t * v)
            .sum::<f64>()
            * h;
        gap = 0.5 * (s.value - current) / value.abs();
        if gap <= options.tolerance {
            break;
        }
        let mut accepted = false;
        while eta >= 1e-6 {
            let trial = theta.zip_map(&s.optimizer, |a, b| (1.0 - eta) * a + eta * b);
            let tobj = DualObjective::new(params, &trial, y0, q, dual);
            let (tz, tv) = tobj.minimize(&trial, dual, z.clone())?;
            if tv > value {
                theta = trial;
                z = tz;
                value = tv;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        it += 1;
        if !accepted {
            break;
        }
        eta = (2.0 * eta).min(0.5);
        history.push((-2.0 * value).max(0.0).sqrt());
    }
    if history.len() < 2 && gap > options.tolerance && it >= options.max_iterations {
        return Err(Error::NonConvergence {
            stage: "relaxed".into(),
            iterations: it,
            message: "density ascent made no progress".into(),
            residuals: vec![gap],
        });
    }
    monotone(&mut history);
    Ok((theta, history, gap, it, Some(z)))
}

/// Best-so-far envelope of a minimization history.
fn monotone(history: &mut [f64]) {
    for k in 1..history.len() {
        history[k] = history[k].min(history[k - 1]);
    }
}

/// Runs the equilibrium stage on a solved reduced game: extraction, Nash
/// residuals and the sampled audit.
#[allow(clippy::too_many_arguments)]
pub fn nash_report(
    gp2: &Gp2Solution,
    y0: &Field,
    alpha: f64,
    params: &PdeParams,
    dual: &DualSolveOptions,
    tie_rule: TieRule,
    probes: &NashProbes,
    samples: usize,
) -> Result<(NashReport, Extraction)> {
    let grid = params.grid();
    let extraction = extract_actuator(&gp2.f_bar, alpha, grid, tie_rule)?;
    let residuals = nash_residual(&gp2.theta, &gp2.z, y0, 2.0, params, dual.tikhonov, probes)?;
    let table = optimality_sample_test(
        &extraction.mask.optimizer,
        y0,
        alpha,
        2.0,
        params,
        dual,
        samples,
        probes.seed,
    )?;
    Ok((
        NashReport {
            theta: gp2.theta.clone(),
            psi: gp2.z.clone(),
            psi_trajectory: gp2.psi.clone(),
            f_bar: gp2.f_bar.clone(),
            threshold: extraction.mask.threshold,
            mask: extraction.mask.optimizer.clone(),
            residuals,
            samples: table,
        },
        extraction,
    ))
}

/// Warm-started minimum-norm solve for a density.
pub fn min_norm_for_density(
    theta: &Field,
    q: f64,
    y0: &Field,
    params: &PdeParams,
    dual: &DualSolveOptions,
    start: Option<&DualCoefficients>,
) -> Result<MinNormResult> {
    solve_min_j_from(
        &theta.map(|t| t.max(0.0).sqrt()),
        q,
        y0,
        params,
        dual,
        start,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::EigenBasis;
    use crate::heat::{Potential, Scheme};
    use std::f64::consts::PI;

    fn params(n: usize, m: usize, steps: usize) -> PdeParams {
        let g = Grid::new(&[1.0], &[n]).unwrap();
        let b = EigenBasis::new(&g, m).unwrap();
        PdeParams::new(g, b, 0.1, steps, Potential::Zero, Scheme::ExactSpectral).unwrap()
    }

    #[test]
    fn f_eval_examples() {
        let p = params(32, 2, 50);
        let g = p.grid();
        let y0 = p.basis().mode(0);
        let zero = Trajectory::zeros(&p);
        assert_eq!(
            f_eval(&Field::constant(32, 0.5), &zero, 2.0, &y0, g).unwrap(),
            0.0
        );
        let c = 1.3;
        let psi = solve_backward(&DualCoefficients::new(vec![c, 0.0]), &p).unwrap();
        let gt: f64 = p
            .quadrature_weights()
            .iter()
            .enumerate()
            .map(|(j, w)| w * (-2.0 * PI * PI * (0.1 - j as f64 * p.dt())).exp())
            .sum();
        let d = (-PI * PI * 0.1f64).exp();
        let f = f_eval(&Field::constant(32, 0.5), &psi, 2.0, &y0, g).unwrap();
        assert!((f - (-0.25 * gt * c * c - c * d)).abs() < 1e-12);
    }

    #[test]
    fn cross_energy_examples() {
        let p = params(32, 3, 40);
        let psi = solve_backward(&DualCoefficients::new(vec![1.0, 0.5, -0.3]), &p).unwrap();
        let f = cross_energy_field(&psi, &psi).unwrap();
        assert!(f.iter().all(|&v| v >= 0.0));
        let neg = psi.map_fields(|f| f.scale(-1.0));
        let g = cross_energy_field(&psi, &neg).unwrap();
        assert!(f.zip_map(&g, |a, b| a + b).iter().all(|&v| v.abs() < 1e-15));
        // agrees with the per-cell Gramians
        let e = p.energy_field(&DVector::from_vec(vec![1.0, 0.5, -0.3]));
        assert!(e.max_abs_diff(&f) < 1e-13);
    }

    #[test]
    fn cross_energy_of_two_modes_factorizes() {
        let p = params(64, 2, 200);
        let a = solve_backward(&DualCoefficients::unit(2, 0), &p).unwrap();
        let b = solve_backward(&DualCoefficients::unit(2, 1), &p).unwrap();
        let f = cross_energy_field(&a, &b).unwrap();
        let time: f64 = p
            .quadrature_weights()
            .iter()
            .enumerate()
            .map(|(j, w)| w * (-5.0 * PI * PI * (0.1 - j as f64 * p.dt())).exp())
            .sum();
        let e1 = p.basis().mode(0);
        let e2 = p.basis().mode(1);
        for i in 0..64 {
            assert!((f[i] - time * e1[i] * e2[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn nf_norm_single_mode() {
        let n = 400;
        let p = params(n, 1, 200);
        let psi = solve_backward(&DualCoefficients::unit(1, 0), &p).unwrap();
        let gt: f64 = p
            .quadrature_weights()
            .iter()
            .enumerate()
            .map(|(j, w)| w * (-2.0 * PI * PI * (0.1 - j as f64 * p.dt())).exp())
            .sum();
        let nf = nf_norm(&psi, 2.0, 0.5, p.grid()).unwrap();
        let want = (2.0 * gt * (0.25 + 1.0 / (2.0 * PI))).sqrt();
        assert!((nf - want).abs() < 1e-5 * want);
    }

    #[test]
    fn nf_norm_is_homogeneous() {
        let p = params(24, 4, 30);
        let psi = solve_backward(&DualCoefficients::new(vec![0.3, -1.0, 0.4, 0.1]), &p).unwrap();
        for q in [1.0, 1.5, 2.0] {
            let a = nf_norm(&psi, q, 0.3, p.grid()).unwrap();
            let b = nf_norm(&psi.map_fields(|f| f.scale(-2.5)), q, 0.3, p.grid()).unwrap();
            assert!((b - 2.5 * a).abs() < 1e-10 * b);
        }
    }

    #[test]
    fn waterfill_hits_mass_and_bounds() {
        let g = [3.0, 1.0, 2.0, 2.0, 0.5, 0.0];
        for mu in [10.0, 1.0, 0.1, 1e-6] {
            let t = waterfill(&g, mu, 2.5);
            let s: f64 = t.iter().sum();
            // (g - λ)/μ loses digits as μ shrinks
            assert!((s - 2.5).abs() < 1e-12 * (1.0 + 3.0 / mu));
            assert!(t.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn extraction_examples() {
        let g = Grid::new(&[1.0], &[8]).unwrap();
        let f = Field::new(vec![0.1, 0.5, 0.9, 0.7, 0.8, 0.6, 0.3, 0.2]);
        let e = extract_actuator(&f, 0.5, &g, TieRule::LowestIndex).unwrap();
        assert_eq!(
            e.mask.optimizer.values(),
            &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]
        );
        let flat =
            extract_actuator(&Field::constant(8, 2.0), 0.25, &g, TieRule::LowestIndex).unwrap();
        assert!(flat.mask.degenerate);
        assert_eq!(g.integral(&flat.mask.optimizer), 0.25);
        assert!(
            extract_actuator(&Field::constant(8, -1.0), 0.25, &g, TieRule::LowestIndex).is_err()
        );
    }

    #[test]
    fn single_mode_energy_gives_centered_interval() {
        let n = 64;
        let g = Grid::new(&[1.0], &[n]).unwrap();
        let f = Field::from_fn(&g, |x| 2.0 * 0.05 * (PI * x[0]).sin().powi(2));
        let e = extract_actuator(&f, 0.5, &g, TieRule::SymmetricPairing).unwrap();
        let on: Vec<usize> = (0..n).filter(|&i| e.mask.optimizer[i] == 1.0).collect();
        assert_eq!(on.first(), Some(&16));
        assert_eq!(on.last(), Some(&47));
    }

    #[test]
    fn relaxed_location_prefers_more_actuation() {
        let p = params(24, 6, 40);
        let y0 = p.basis().mode(0);
        let dual = DualSolveOptions::default();
        let opts = RelaxedOptions {
            max_iterations: 300,
            tolerance: 1e-5,
            ..Default::default()
        };
        let small = solve_relaxed_location(&y0, 0.1, 2.0, &p, &dual, &opts).unwrap();
        let large = solve_relaxed_location(&y0, 0.95, 2.0, &p, &dual, &opts).unwrap();
        assert!(large.norm < small.norm);
        assert!((p.grid().integral(&large.theta) - 0.95).abs() < 1e-10);
        assert!(large.theta.iter().all(|&t| (0.0..=1.0).contains(&t)));
        for w in small.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn gp2_and_relaxed_location_agree_on_small_problem() {
        let p = params(32, 8, 60);
        let y0 = Field::from_fn(p.grid(), |x| {
            (PI * x[0]).sin() + 0.4 * (2.0 * PI * x[0]).sin()
        });
        let dual = DualSolveOptions::default();
        let gp2 = solve_gp2(&y0, 0.4, 2.0, &p, &Gp2Options::default()).unwrap();
        assert!(gp2.gap <= 1e-8, "gap {}", gp2.gap);
        for w in gp2.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let n_gp2 = min_norm_for_density(&gp2.theta, 2.0, &y0, &p, &dual, None)
            .unwrap()
            .norm;
        let rel =
            solve_relaxed_location(&y0, 0.4, 2.0, &p, &dual, &RelaxedOptions::default()).unwrap();
        assert!(
            (rel.norm - n_gp2).abs() <= 1e-4 * n_gp2,
            "{} vs {}",
            rel.norm,
            n_gp2
        );
    }

    #[test]
    fn nash_residuals_detect_non_equilibria() {
        let p = params(32, 8, 60);
        let y0 = p.basis().mode(0);
        let gp2 = solve_gp2(&y0, 0.5, 2.0, &p, &Gp2Options::default()).unwrap();
        let probes = NashProbes::default();
        let eq = nash_residual(&gp2.theta, &gp2.z, &y0, 2.0, &p, 1e-8, &probes).unwrap();
        assert!(eq.r_theta <= 1e-6 * eq.value.abs());
        assert!(eq.r_psi <= 1e-6 * eq.value.abs());
        let uniform = Field::constant(32, 0.5);
        let bad = nash_residual(&uniform, &gp2.z, &y0, 2.0, &p, 1e-8, &probes).unwrap();
        assert!(bad.r_theta > 0.0);
        let zero = nash_residual(
            &gp2.theta,
            &DualCoefficients::zeros(8),
            &y0,
            2.0,
            &p,
            1e-8,
            &probes,
        )
        .unwrap();
        assert!(zero.r_psi > 0.0);
    }

    #[test]
    fn sign_flip_of_initial_state() {
        let p = params(32, 8, 60);
        let y0 = Field::from_fn(p.grid(), |x| {
            (PI * x[0]).sin() + 0.5 * (2.0 * PI * x[0]).sin()
        });
        let a = solve_gp2(&y0, 0.5, 2.0, &p, &Gp2Options::default()).unwrap();
        let b = solve_gp2(&y0.scale(-1.0), 0.5, 2.0, &p, &Gp2Options::default()).unwrap();
        assert_eq!(a.z.scale(-1.0), b.z);
        assert!(
            a.f_bar.max_abs_diff(&b.f_bar) <= 1e-8 * a.f_bar.iter().fold(0.0f64, |m, v| m.max(*v))
        );
    }

    #[test]
    fn zero_initial_state_is_rejected() {
        let p = params(16, 4, 20);
        let err = solve_gp2(&Field::zeros(16), 0.5, 2.0, &p, &Gp2Options::default()).unwrap_err();
        assert!(matches!(err, Error::Precondition { ref stage, .. } if stage == "gp2"));
    }

    #[test]
    fn sample_table_is_empty_without_samples() {
        let p = params(16, 4, 20);
        let y0 = p.basis().mode(0);
        let mask = Field::new(
            (0..16)
                .map(|i| if (4..12).contains(&i) { 1.0 } else { 0.0 })
                .collect(),
        );
        let t =
            optimality_sample_test(&mask, &y0, 0.5, 2.0, &p, &DualSolveOptions::default(), 0, 0)
                .unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.violations, 0);
    }
}
