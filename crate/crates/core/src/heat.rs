//! Forward and backward heat equations with a bounded potential, integrated in
//! the truncated Dirichlet eigenbasis.
//!
//! Each step maps coefficients through `S_j = (I + dt/2 A_j)^{-1}(I - dt/2 A_j)`
//! with `A_j = Λ + P(a)` (Crank–Nicolson) or through `exp(-Λ dt)` when the
//! potential vanishes and the exact propagator is requested. Sources enter
//! with half weights on both sides of a step, which makes the forward map and
//! the backward adjoint map exact transposes under the trapezoid rule in time:
//!
//! `⟨y(T), z⟩ = ⟨y0, φ(0)⟩ + Σ_j w_j ⟨weight·u_j, φ_j⟩`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::DualCoefficients;
use crate::error::{Error, Result};
use crate::grid::{EigenBasis, Field, Grid};

#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    Zero,
    /// Time-independent a(x).
    Stationary(Field),
    /// a(x, t_j) at every time node (n_t + 1 fields).
    Varying(Vec<Field>),
}

impl Potential {
    fn is_zero(&self) -> bool {
        match self {
            Potential::Zero => true,
            Potential::Stationary(a) => a.iter().all(|&v| v == 0.0),
            Potential::Varying(fs) => fs.iter().all(|a| a.iter().all(|&v| v == 0.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Exact semigroup `exp(-λ_k dt)`; only valid without potential.
    ExactSpectral,
    CrankNicolson,
}

#[derive(Debug, Clone)]
enum Propagator {
    Diagonal(DVector<f64>),
    Uniform(DMatrix<f64>),
    PerStep(Vec<DMatrix<f64>>),
}

/// Horizon, time grid, potential and basis of one heat problem, together with
/// the precomputed step operators.
#[derive(Debug)]
pub struct PdeParams {
    grid: Grid,
    basis: EigenBasis,
    horizon: f64,
    steps: usize,
    potential: Potential,
    scheme: Scheme,
    propagator: Propagator,
    weights: Vec<f64>,
    cell_gramians: OnceLock<Vec<DMatrix<f64>>>,
    backward_maps: OnceLock<Vec<DMatrix<f64>>>,
}

impl PdeParams {
    pub fn new(
        grid: Grid,
        basis: EigenBasis,
        horizon: f64,
        steps: usize,
        potential: Potential,
        scheme: Scheme,
    ) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::validation(
                "T",
                format!("horizon must be positive, got {horizon}"),
            ));
        }
        if steps == 0 {
            return Err(Error::validation(
                "n_t",
                "at least one time step is required",
            ));
        }
        if basis.cell_count() != grid.cell_count() {
            return Err(Error::ShapeMismatch(
                "eigenbasis was built on a different grid".into(),
            ));
        }
        match &potential {
            Potential::Zero => {}
            Potential::Stationary(a) => {
                grid.check(a)?;
                if !a.is_finite() {
                    return Err(Error::validation("potential", "non-finite values"));
                }
            }
            Potential::Varying(fs) => {
                if fs.len() != steps + 1 {
                    return Err(Error::ShapeMismatch(format!(
                        "potential has {} time nodes, expected {}",
                        fs.len(),
                        steps + 1
                    )));
                }
                for a in fs {
                    grid.check(a)?;
                    if !a.is_finite() {
                        return Err(Error::validation("potential", "non-finite values"));
                    }
                }
            }
        }
        let potential = if potential.is_zero() {
            Potential::Zero
        } else {
            potential
        };
        if scheme == Scheme::ExactSpectral && potential != Potential::Zero {
            return Err(Error::config(
                "the exact spectral propagator requires a zero potential",
            ));
        }

        let dt = horizon / steps as f64;
        let lambda = DVector::from_column_slice(basis.eigenvalues());
        let propagator = match (&potential, scheme) {
            (Potential::Zero, Scheme::ExactSpectral) => {
                Propagator::Diagonal(lambda.map(|l| (-l * dt).exp()))
            }
            (Potential::Zero, Scheme::CrankNicolson) => {
                Propagator::Diagonal(lambda.map(|l| (1.0 - 0.5 * dt * l) / (1.0 + 0.5 * dt * l)))
            }
            (Potential::Stationary(a), _) => {
                Propagator::Uniform(cn_step(&lambda, &basis.mass_matrix(a), dt)?)
            }
            (Potential::Varying(fs), _) => Propagator::PerStep(
                fs.windows(2)
                    .map(|w| {
                        let mid = w[0].zip_map(&w[1], |a, b| 0.5 * (a + b));
                        cn_step(&lambda, &basis.mass_matrix(&mid), dt)
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(PdeParams {
            grid,
            basis,
            horizon,
            steps,
            potential,
            scheme,
            propagator,
            weights: trapezoid_weights(steps, dt),
            cell_gramians: OnceLock::new(),
            backward_maps: OnceLock::new(),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn basis(&self) -> &EigenBasis {
        &self.basis
    }

    pub fn modes(&self) -> usize {
        self.basis.len()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Trapezoid weights of the time nodes.
    pub fn quadrature_weights(&self) -> &[f64] {
        &self.weights
    }

    /// `S_j v`.
    pub fn step(&self, j: usize, v: &DVector<f64>) -> DVector<f64> {
        match &self.propagator {
            Propagator::Diagonal(s) => v.component_mul(s),
            Propagator::Uniform(s) => s * v,
            Propagator::PerStep(ss) => &ss[j] * v,
        }
    }

    /// `S_jᵀ v`.
    pub fn step_transpose(&self, j: usize, v: &DVector<f64>) -> DVector<f64> {
        match &self.propagator {
            Propagator::Diagonal(s) => v.component_mul(s),
            Propagator::Uniform(s) => s.tr_mul(v),
            Propagator::PerStep(ss) => ss[j].tr_mul(v),
        }
    }

    /// `m S_j`.
    fn right_step(&self, j: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.propagator {
            Propagator::Diagonal(s) => {
                let mut out = m.clone();
                for (mut col, &sk) in out.column_iter_mut().zip(s.iter()) {
                    col *= sk;
                }
                out
            }
            Propagator::Uniform(s) => m * s,
            Propagator::PerStep(ss) => m * &ss[j],
        }
    }

    /// Free evolution of initial coefficients to the final time.
    pub fn propagate(&self, c0: &DVector<f64>) -> DVector<f64> {
        (0..self.steps).fold(c0.clone(), |c, j| self.step(j, &c))
    }

    /// Adjoint coefficients φ_j for terminal data `z`, indexed by time node.
    pub fn backward_coefficients(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::zeros(z.len()); self.steps + 1];
        out[self.steps] = z.clone();
        for j in (0..self.steps).rev() {
            out[j] = self.step_transpose(j, &out[j + 1]);
        }
        out
    }

    /// Forward coefficients for initial coefficients `c0` and per-node source
    /// coefficients (already projected on the basis).
    pub fn forward_coefficients(
        &self,
        c0: &DVector<f64>,
        sources: Option<&[DVector<f64>]>,
    ) -> Vec<DVector<f64>> {
        let half = 0.5 * self.dt();
        let mut out = Vec::with_capacity(self.steps + 1);
        out.push(c0.clone());
        for j in 0..self.steps {
            let next = match sources {
                Some(f) => self.step(j, &(&out[j] + &f[j] * half)) + &f[j + 1] * half,
                None => self.step(j, &out[j]),
            };
            out.push(next);
        }
        out
    }

    /// `Σ_j Q_j v_j` where `Q_j = S_{N-1}⋯S_j`; the terminal value of a
    /// forward sweep whose sources are already quadrature-weighted.
    pub fn accumulate(&self, lumps: &[DVector<f64>]) -> DVector<f64> {
        let mut acc = lumps[0].clone();
        for j in 0..self.steps {
            acc = self.step(j, &acc) + &lumps[j + 1];
        }
        acc
    }

    /// Per-cell Gramians `H_i = Σ_j w_j (Q_j e(x_i))(Q_j e(x_i))ᵀ`, built on
    /// first use. `zᵀ H_i z` is the time-integrated squared adjoint at cell i.
    pub fn cell_gramians(&self) -> &[DMatrix<f64>] {
        self.cell_gramians
            .get_or_init(|| self.build_cell_gramians())
    }

    /// Products `Q_j = S_{N-1}⋯S_j` per node (`Q_N = I`), so that the adjoint
    /// coefficients are `φ_j = Q_jᵀ z`. Built on first use.
    pub fn backward_maps(&self) -> &[DMatrix<f64>] {
        self.backward_maps.get_or_init(|| {
            let m = self.modes();
            let mut maps = Vec::with_capacity(self.steps + 1);
            let mut q = DMatrix::<f64>::identity(m, m);
            maps.push(q.clone());
            for j in (0..self.steps).rev() {
                q = self.right_step(j, &q);
                maps.push(q.clone());
            }
            maps.reverse();
            maps
        })
    }

    fn build_cell_gramians(&self) -> Vec<DMatrix<f64>> {
        let m = self.modes();
        let cells = self.grid.cell_count();
        let et = self.basis.samples().transpose();
        let images: Vec<DMatrix<f64>> = self.backward_maps().iter().map(|q| q * &et).collect();
        let roots: Vec<f64> = self.weights.iter().map(|w| w.sqrt()).collect();
        (0..cells)
            .into_par_iter()
            .map(|i| {
                let mut x = DMatrix::<f64>::zeros(self.steps + 1, m);
                for (j, img) in images.iter().enumerate() {
                    for k in 0..m {
                        x[(j, k)] = roots[j] * img[(k, i)];
                    }
                }
                x.tr_mul(&x)
            })
            .collect()
    }

    /// Weighted Gramian `G_θ = Σ_i θ_i h H_i`.
    pub fn gramian(&self, theta: &Field) -> DMatrix<f64> {
        let h = self.grid.cell_measure();
        let m = self.modes();
        let mut g = DMatrix::zeros(m, m);
        for (hi, &t) in self.cell_gramians().iter().zip(theta.iter()) {
            if t != 0.0 {
                g += hi * (t * h);
            }
        }
        g
    }

    /// Cell values of `zᵀ H_i z`.
    pub fn energy_field(&self, z: &DVector<f64>) -> Field {
        Field::new(
            self.cell_gramians()
                .iter()
                .map(|hi| z.dot(&(hi * z)).max(0.0))
                .collect(),
        )
    }

    pub fn synthesize(&self, coefficients: &[DVector<f64>]) -> Trajectory {
        Trajectory {
            dt: self.dt(),
            fields: coefficients
                .iter()
                .map(|c| self.basis.synthesize(c))
                .collect(),
        }
    }
}

fn cn_step(lambda: &DVector<f64>, potential: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let m = lambda.len();
    let mut a = potential.clone();
    for k in 0..m {
        a[(k, k)] += lambda[k];
    }
    let id = DMatrix::<f64>::identity(m, m);
    let lhs = &id + &a * (0.5 * dt);
    let rhs = &id - &a * (0.5 * dt);
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("Crank–Nicolson step matrix is singular".into()))
}

pub fn trapezoid_weights(steps: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![dt; steps + 1];
    w[0] = 0.5 * dt;
    w[steps] = 0.5 * dt;
    w
}

/// Fields at the uniform time nodes `t_j = j·dt`, `j = 0..=n_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dt: f64,
    fields: Vec<Field>,
}

impl Trajectory {
    pub fn new(dt: f64, fields: Vec<Field>) -> Result<Self> {
        if fields.len() < 2 {
            return Err(Error::ShapeMismatch(
                "a trajectory needs at least two time nodes".into(),
            ));
        }
        let n = fields[0].len();
        if fields.iter().any(|f| f.len() != n) {
            return Err(Error::ShapeMismatch(
                "trajectory fields have different lengths".into(),
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::validation("dt", "time step must be positive"));
        }
        Ok(Trajectory { dt, fields })
    }

    pub fn zeros(params: &PdeParams) -> Self {
        Trajectory {
            dt: params.dt(),
            fields: vec![Field::zeros(params.grid().cell_count()); params.steps() + 1],
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn nodes(&self) -> usize {
        self.fields.len()
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps() as f64
    }

    pub fn cell_count(&self) -> usize {
        self.fields[0].len()
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn field(&self, j: usize) -> &Field {
        &self.fields[j]
    }

    pub fn initial(&self) -> &Field {
        &self.fields[0]
    }

    pub fn terminal(&self) -> &Field {
        &self.fields[self.fields.len() - 1]
    }

    pub fn quadrature_weights(&self) -> Vec<f64> {
        trapezoid_weights(self.steps(), self.dt)
    }

    pub fn map_fields(&self, f: impl Fn(&Field) -> Field) -> Trajectory {
        Trajectory {
            dt: self.dt,
            fields: self.fields.iter().map(f).collect(),
        }
    }

    /// L² norm of every time slice.
    pub fn slice_norms(&self, grid: &Grid) -> Vec<f64> {
        self.fields.iter().map(|f| grid.norm(f)).collect()
    }

    fn check_compatible(&self, params: &PdeParams) -> Result<()> {
        if self.steps() != params.steps() {
            return Err(Error::ShapeMismatch(format!(
                "trajectory has {} steps, problem has {}",
                self.steps(),
                params.steps()
            )));
        }
        if self.cell_count() != params.grid().cell_count() {
            return Err(Error::ShapeMismatch(
                "trajectory lives on a different grid".into(),
            ));
        }
        Ok(())
    }
}

/// Controlled forward solve of `y_t - Δy + a y = weight·u`, `y(0) = y0`.
///
/// The state lives in the span of the basis, so the stored initial slice is the
/// projection of `y0`.
pub fn solve_forward(
    y0: &Field,
    weight: &Field,
    control: Option<&Trajectory>,
    params: &PdeParams,
) -> Result<Trajectory> {
    params.grid().check(y0)?;
    params.grid().check(weight)?;
    let basis = params.basis();
    let c0 = basis.project(y0);
    let sources = match control {
        Some(u) => {
            u.check_compatible(params)?;
            Some(
                u.fields()
                    .iter()
                    .map(|f| basis.project(&f.zip_map(weight, |a, b| a * b)))
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let coeffs = params.forward_coefficients(&c0, sources.as_deref());
    Ok(params.synthesize(&coeffs))
}

/// Backward adjoint solve of `φ_t + Δφ - aφ = 0`, `φ(T) = Σ z_k e_k`.
pub fn solve_backward(z: &DualCoefficients, params: &PdeParams) -> Result<Trajectory> {
    if z.len() > params.modes() {
        return Err(Error::ShapeMismatch(format!(
            "{} coefficients for a {}-mode basis",
            z.len(),
            params.modes()
        )));
    }
    let mut full = DVector::zeros(params.modes());
    full.rows_mut(0, z.len()).copy_from(z.as_vector());
    Ok(params.synthesize(&params.backward_coefficients(&full)))
}

/// Pointwise product `β·φ` at every time node.
pub fn weighted_output(phi: &Trajectory, beta: &Field) -> Result<Trajectory> {
    if beta.len() != phi.cell_count() {
        return Err(Error::ShapeMismatch(
            "weight and trajectory grids differ".into(),
        ));
    }
    Ok(phi.map_fields(|f| f.zip_map(beta, |a, b| a * b)))
}

/// `(∫₀ᵀ ‖ζ(t)‖^q dt)^{1/q}` for `q ∈ [1, 2]`.
pub fn space_time_norm(zeta: &Trajectory, q: f64, grid: &Grid) -> Result<f64> {
    if !(1.0..=2.0).contains(&q) {
        return Err(Error::Unsupported(format!(
            "time exponent q = {q} outside [1, 2]"
        )));
    }
    time_norm(zeta, q, grid)
}

/// `L^p(0,T;L²)` norm for any `p ∈ [1, ∞]`, trapezoid rule in time.
pub fn time_norm(traj: &Trajectory, p: f64, grid: &Grid) -> Result<f64> {
    if traj.cell_count() != grid.cell_count() {
        return Err(Error::ShapeMismatch("trajectory and grid differ".into()));
    }
    if !(p >= 1.0) {
        return Err(Error::Unsupported(format!("exponent {p} below 1")));
    }
    let norms = traj.slice_norms(grid);
    Ok(lp_of_norms(&norms, &traj.quadrature_weights(), p))
}

/// Discrete `L^p(0,T)` norm of per-node magnitudes.
pub fn lp_of_norms(norms: &[f64], weights: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return norms.iter().copied().fold(0.0, f64::max);
    }
    let s: f64 = norms.iter().zip(weights).map(|(n, w)| w * n.powf(p)).sum();
    s.powf(1.0 / p)
}
