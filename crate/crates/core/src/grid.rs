//! Discretized domain: intervals and axis-aligned rectangles split into
//! uniform cells, the Dirichlet sine eigenbasis, and the admissible density
//! classes used for actuator placement.
//!
//! Every spatial integral in the crate is a cell sum weighted by
//! [`Grid::cell_measure`]; fields are piecewise constant per cell.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on class masses, scaled by `max(1, m(Ω))`.
pub const MASS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    extents: Vec<f64>,
    counts: Vec<usize>,
    cell_measure: f64,
    total_measure: f64,
}

impl Grid {
    /// Builds a 1D or 2D grid. `extents[a]` is the side length along axis `a`
    /// and `counts[a]` the number of cells along it.
    pub fn new(extents: &[f64], counts: &[usize]) -> Result<Self> {
        if extents.is_empty() || extents.len() > 2 {
            return Err(Error::config(format!(
                "grid dimension must be 1 or 2, got {}",
                extents.len()
            )));
        }
        if extents.len() != counts.len() {
            return Err(Error::config(format!(
                "{} extents but {} cell counts",
                extents.len(),
                counts.len()
            )));
        }
        for (axis, (&l, &n)) in extents.iter().zip(counts).enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::config(format!(
                    "extent on axis {axis} must be positive, got {l}"
                )));
            }
            if n == 0 {
                return Err(Error::config(format!(
                    "cell count on axis {axis} must be positive"
                )));
            }
        }
        let cell_measure: f64 = extents
            .iter()
            .zip(counts)
            .map(|(&l, &n)| l / n as f64)
            .product();
        let cells: usize = counts.iter().product();
        Ok(Grid {
            extents: extents.to_vec(),
            counts: counts.to_vec(),
            cell_measure,
            // defined through the product so that the identity is exact
            total_measure: cell_measure * cells as f64,
        })
    }

    pub fn dimension(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn cell_count(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn cell_measure(&self) -> f64 {
        self.cell_measure
    }

    pub fn total_measure(&self) -> f64 {
        self.total_measure
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.extents[axis] / self.counts[axis] as f64
    }

    /// Per-axis integer indices of a cell; the x index varies fastest.
    pub fn axis_indices(&self, cell: usize) -> [usize; 2] {
        let nx = self.counts[0];
        [cell % nx, cell / nx]
    }

    /// Cell-center coordinates (one entry per axis).
    pub fn cell_center(&self, cell: usize) -> Vec<f64> {
        let idx = self.axis_indices(cell);
        (0..self.dimension())
            .map(|a| (idx[a] as f64 + 0.5) * self.spacing(a))
            .collect()
    }

    /// Squared distance from a cell center to the domain center, computed from
    /// integer offsets so mirror-image cells get bit-identical values.
    pub fn center_distance_sq(&self, cell: usize) -> f64 {
        let idx = self.axis_indices(cell);
        (0..self.dimension())
            .map(|a| {
                let off = (2 * idx[a] + 1) as i64 - self.counts[a] as i64;
                let d = off as f64 * 0.5 * self.spacing(a);
                d * d
            })
            .sum()
    }

    /// Index of the cell obtained by reflecting through the domain center.
    pub fn mirror_cell(&self, cell: usize) -> usize {
        let [ix, iy] = self.axis_indices(cell);
        let nx = self.counts[0];
        let mx = nx - 1 - ix;
        let my = if self.dimension() == 2 {
            self.counts[1] - 1 - iy
        } else {
            0
        };
        my * nx + mx
    }

    pub fn check(&self, field: &Field) -> Result<()> {
        if field.len() != self.cell_count() {
            return Err(Error::ShapeMismatch(format!(
                "field has {} values, grid has {} cells",
                field.len(),
                self.cell_count()
            )));
        }
        Ok(())
    }

    /// Discrete L² inner product (cell sum).
    pub fn inner(&self, a: &Field, b: &Field) -> f64 {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| x * y)
            .sum::<f64>()
            * self.cell_measure
    }

    pub fn norm(&self, a: &Field) -> f64 {
        self.inner(a, a).sqrt()
    }

    /// Discrete integral ∫ f dx.
    pub fn integral(&self, a: &Field) -> f64 {
        a.values.iter().sum::<f64>() * self.cell_measure
    }

    /// Mass tolerance used by the class invariants.
    pub fn mass_tolerance(&self) -> f64 {
        MASS_TOL * self.total_measure.max(1.0)
    }
}

/// Real-valued, piecewise-constant function on the grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    values: Vec<f64>,
}

impl Field {
    pub fn new(values: Vec<f64>) -> Self {
        Field { values }
    }

    pub fn zeros(len: usize) -> Self {
        Field::constant(len, 0.0)
    }

    pub fn constant(len: usize, value: f64) -> Self {
        Field {
            values: vec![value; len],
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        Field {
            values: (0..grid.cell_count())
                .map(|c| f(&grid.cell_center(c)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        debug_assert_eq!(self.len(), other.len());
        Field {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Field {
        self.map(|v| v * s)
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for Field {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Dirichlet Laplacian eigenpairs of the tensor sine basis, sampled at cell
/// centers and normalized in the discrete inner product.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    eigenvalues: Vec<f64>,
    indices: Vec<[usize; 2]>,
    /// cells × modes; column k holds e_k.
    samples: DMatrix<f64>,
    cell_measure: f64,
}

impl EigenBasis {
    pub fn new(grid: &Grid, modes: usize) -> Result<Self> {
        let cells = grid.cell_count();
        if modes == 0 {
            return Err(Error::config("at least one eigenmode is required"));
        }
        if modes > cells {
            return Err(Error::config(format!(
                "{modes} modes requested but the grid resolves only {cells}"
            )));
        }
        let dim = grid.dimension();
        let mut candidates: Vec<([usize; 2], f64)> = Vec::new();
        let ny = if dim == 2 { grid.counts()[1] } else { 1 };
        for kx in 1..=grid.counts()[0] {
            for ky in 1..=ny {
                let k = [kx, if dim == 2 { ky } else { 0 }];
                let lambda: f64 = (0..dim)
                    .map(|a| {
                        let r = k[a] as f64 / grid.extents()[a];
                        r * r
                    })
                    .sum::<f64>()
                    * std::f64::consts::PI
                    * std::f64::consts::PI;
                candidates.push((k, lambda));
            }
        }
        candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        candidates.truncate(modes);

        let h = grid.cell_measure();
        let mut samples = DMatrix::zeros(cells, modes);
        for (m, (k, _)) in candidates.iter().enumerate() {
            for c in 0..cells {
                let x = grid.cell_center(c);
                let mut v = 1.0;
                for a in 0..dim {
                    let l = grid.extents()[a];
                    v *= (2.0 / l).sqrt() * (k[a] as f64 * std::f64::consts::PI * x[a] / l).sin();
                }
                samples[(c, m)] = v;
            }
            // the top mode on an axis (k = n) has a different discrete norm
            let norm = (samples.column(m).norm_squared() * h).sqrt();
            if (norm - 1.0).abs() > 1e-14 {
                samples.column_mut(m).scale_mut(1.0 / norm);
            }
        }
        Ok(EigenBasis {
            eigenvalues: candidates.iter().map(|c| c.1).collect(),
            indices: candidates.iter().map(|c| c.0).collect(),
            samples,
            cell_measure: h,
        })
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn axis_indices(&self) -> &[[usize; 2]] {
        &self.indices
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn cell_count(&self) -> usize {
        self.samples.nrows()
    }

    pub fn mode(&self, k: usize) -> Field {
        Field::new(self.samples.column(k).iter().copied().collect())
    }

    /// Coefficients ⟨f, e_k⟩ in the discrete inner product.
    pub fn project(&self, f: &Field) -> DVector<f64> {
        let v = DVector::from_column_slice(f.values());
        self.samples.tr_mul(&v) * self.cell_measure
    }

    /// Σ c_k e_k sampled on the grid.
    pub fn synthesize(&self, coefficients: &DVector<f64>) -> Field {
        Field::new((&self.samples * coefficients).iter().copied().collect())
    }

    /// Weighted mass matrix ⟨w e_k, e_l⟩.
    pub fn mass_matrix(&self, weight: &Field) -> DMatrix<f64> {
        let mut scaled = self.samples.clone();
        for (c, mut row) in scaled.row_iter_mut().enumerate() {
            row *= weight[c] * self.cell_measure;
        }
        self.samples.tr_mul(&scaled)
    }

    /// Discrete Gram matrix of the basis; the identity up to rounding.
    pub fn gram(&self) -> DMatrix<f64> {
        self.mass_matrix(&Field::constant(self.cell_count(), 1.0))
    }
}

/// Measure of the superlevel set {φ ≥ c}.
pub fn superlevel_measure(phi: &Field, c: f64, grid: &Grid) -> f64 {
    phi.iter().filter(|&&v| v >= c).count() as f64 * grid.cell_measure()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityClass {
    /// Indicator functions of sets with measure α·m(Ω).
    Binary,
    /// Amplitudes β ∈ [0,1] with ∫β² = α·m(Ω).
    Amplitude,
    /// Densities θ ∈ [0,1] with ∫θ = α·m(Ω).
    Density,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityClassSpec {
    alpha: f64,
    class: DensityClass,
}

impl DensityClassSpec {
    pub fn new(alpha: f64, class: DensityClass) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::validation(
                "alpha",
                format!("must lie in (0,1), got {alpha}"),
            ));
        }
        Ok(DensityClassSpec { alpha, class })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn class(&self) -> DensityClass {
        self.class
    }

    pub fn target_mass(&self, grid: &Grid) -> f64 {
        self.alpha * grid.total_measure()
    }

    /// Mass carried by `values` in the sense of this class.
    pub fn mass(&self, values: &Field, grid: &Grid) -> f64 {
        match self.class {
            DensityClass::Amplitude => grid.inner(values, values),
            DensityClass::Binary | DensityClass::Density => grid.integral(values),
        }
    }

    pub fn check(&self, values: &Field, grid: &Grid) -> Result<()> {
        grid.check(values)?;
        let target = self.target_mass(grid);
        match self.class {
            DensityClass::Binary => {
                if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Feasibility(format!(
                        "binary mask contains value {v}"
                    )));
                }
                let mass = self.mass(values, grid);
                if (mass - target).abs() > grid.cell_measure() * (1.0 + 1e-12) {
                    return Err(Error::Feasibility(format!(
                        "mask measure {mass} is more than one cell away from {target}"
                    )));
                }
            }
            DensityClass::Amplitude | DensityClass::Density => {
                if let Some(v) = values
                    .iter()
                    .find(|&&v| !(-MASS_TOL..=1.0 + MASS_TOL).contains(&v))
                {
                    return Err(Error::Feasibility(format!("value {v} outside [0,1]")));
                }
                let mass = self.mass(values, grid);
                if (mass - target).abs() > grid.mass_tolerance() {
                    return Err(Error::Feasibility(format!(
                        "class mass {mass} differs from α·m(Ω) = {target}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Restores feasibility for the class described by `spec`: clip to [0,1],
/// rescale the (squared, for amplitudes) mass, and spread any deficit left by
/// saturated cells uniformly over the unsaturated ones.
pub fn project_to_class(values: &Field, spec: &DensityClassSpec, grid: &Grid) -> Result<Field> {
    grid.check(values)?;
    if !values.is_finite() {
        return Err(Error::Feasibility(
            "field contains non-finite values".into(),
        ));
    }
    let target = spec.target_mass(grid);
    if target > grid.total_measure() {
        return Err(Error::Infeasible(format!(
            "target mass {target} exceeds m(Ω) = {}",
            grid.total_measure()
        )));
    }
    if spec.class() != DensityClass::Binary && spec.check(values, grid).is_ok() {
        return Ok(values.clone());
    }
    match spec.class() {
        DensityClass::Binary => {
            let k = ((target / grid.cell_measure()).round() as usize).min(grid.cell_count());
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            let mut mask = Field::zeros(values.len());
            for &c in &order[..k] {
                mask.values_mut()[c] = 1.0;
            }
            Ok(mask)
        }
        DensityClass::Density => Ok(fit_linear_mass(
            values.map(|v| v.clamp(0.0, 1.0)),
            target,
            grid,
        )),
        DensityClass::Amplitude => {
            let squared = values.map(|v| {
                let c = v.clamp(0.0, 1.0);
                c * c
            });
            Ok(fit_linear_mass(squared, target, grid).map(f64::sqrt))
        }
    }
}

fn fit_linear_mass(mut theta: Field, target: f64, grid: &Grid) -> Field {
    let h = grid.cell_measure();
    let tol = 1e-14 * grid.total_measure().max(1.0);
    let mass = grid.integral(&theta);
    if mass > 0.0 {
        let s = target / mass;
        theta = theta.map(|v| (v * s).min(1.0));
    }
    for _ in 0..=theta.len() {
        let mass = grid.integral(&theta);
        let deficit = target - mass;
        if deficit.abs() <= tol {
            break;
        }
        if deficit < 0.0 {
            // only reachable through rounding; shrink proportionally
            let s = target / mass;
            theta = theta.map(|v| v * s);
            continue;
        }
        let free = theta.iter().filter(|&&v| v < 1.0).count();
        if free == 0 {
            break;
        }
        let add = deficit / (free as f64 * h);
        theta = theta.map(|v| if v < 1.0 { (v + add).min(1.0) } else { v });
    }
    theta
}
