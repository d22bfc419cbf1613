//! Run configuration, read from TOML.
//!
//! ```toml
//! horizon = 0.1
//! alpha = 0.5
//!
//! [grid]
//! extents = [1.0]
//! counts = [128]
//!
//! [y0]
//! preset = "mode1"
//! ```
//!
//! Everything else has a default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bathtub::TieRule;
use crate::dual::{conjugate_exponent, DualSolveOptions};
use crate::error::{Error, Result};
use crate::game::{Gp2Options, RelaxedOptions};
use crate::grid::{EigenBasis, Field, Grid};
use crate::heat::{PdeParams, Potential, Scheme};
use crate::output::read_field;

pub const DEFAULT_MODES: usize = 32;
pub const DEFAULT_STEPS: usize = 200;

/// Time exponent of the control norm; `inf` is accepted as a bare float or
/// as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exponent(pub f64);

impl Default for Exponent {
    fn default() -> Self {
        Exponent(2.0)
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Exponent(v)),
            Raw::Int(v) => Ok(Exponent(v as f64)),
            Raw::Text(t) if matches!(t.trim(), "inf" | "infinity" | "∞") => {
                Ok(Exponent(f64::INFINITY))
            }
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub extents: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Potential `a(x)`; absent means zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub constant: Option<f64>,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// First Dirichlet eigenmode, unit norm.
    Mode1,
    /// Smooth compactly supported bump off the domain centre, unit norm.
    Bump,
}

/// Initial state: exactly one of the three keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub preset: Option<Preset>,
    /// Coefficients on the leading eigenmodes.
    pub coefficients: Option<Vec<f64>>,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NashConfig {
    pub theta_probes: usize,
    pub psi_probes: usize,
    /// Random masks compared against the extracted actuator.
    pub samples: usize,
}

impl Default for NashConfig {
    fn default() -> Self {
        NashConfig {
            theta_probes: 200,
            psi_probes: 60,
            samples: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_modes")]
    pub modes: usize,
    pub alpha: f64,
    #[serde(default)]
    pub p: Exponent,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default)]
    pub potential: PotentialSpec,
    pub y0: InitialSpec,
    #[serde(default)]
    pub dual: DualSolveOptions,
    #[serde(default)]
    pub game: Gp2Options,
    #[serde(default)]
    pub nash: NashConfig,
    #[serde(default)]
    pub relaxed: RelaxedOptions,
    #[serde(default)]
    pub tie_rule: TieRule,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; the command line may override it.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Every how many time nodes a trajectory snapshot is written; 0 disables.
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_modes() -> usize {
    DEFAULT_MODES
}

fn default_scheme() -> Scheme {
    Scheme::ExactSpectral
}

fn default_stride() -> usize {
    20
}

/// Parses and validates a configuration. Relative file paths are resolved
/// against `base` when given.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_in(text, None)
}

pub fn parse_config_in(text: &str, base: Option<&Path>) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        Error::Parse {
            line,
            message: e.message().to_string(),
        }
    })?;
    if let Some(base) = base {
        for path in [&mut cfg.potential.file, &mut cfg.y0.file, &mut cfg.output]
            .into_iter()
            .flatten()
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_in(&text, path.parent())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.extents.is_empty() || g.extents.len() > 2 || g.extents.len() != g.counts.len() {
            return Err(Error::validation(
                "grid",
                "extents and counts must both have length 1 or 2",
            ));
        }
        if g.extents.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::validation("grid.extents", "must be positive"));
        }
        if g.counts.contains(&0) {
            return Err(Error::validation("grid.counts", "must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::validation("horizon", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::validation("steps", "must be positive"));
        }
        let cells: usize = g.counts.iter().product();
        if self.modes == 0 || self.modes > cells {
            return Err(Error::validation(
                "modes",
                format!("must lie in 1..={cells}"),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::validation(
                "alpha",
                "must lie strictly between 0 and 1",
            ));
        }
        if !(self.p.0 >= 2.0) {
            return Err(Error::validation("p", "must be at least 2 (or \"inf\")"));
        }
        match (self.potential.constant, &self.potential.file) {
            (Some(_), Some(_)) => {
                return Err(Error::validation(
                    "potential",
                    "give either `constant` or `file`",
                ))
            }
            (Some(c), None) if !c.is_finite() => {
                return Err(Error::validation("potential.constant", "must be finite"))
            }
            (Some(c), None) if c != 0.0 && self.scheme == Scheme::ExactSpectral => {
                return Err(Error::validation(
                    "scheme",
                    "a nonzero potential needs scheme = \"crank_nicolson\"",
                ))
            }
            (None, Some(_)) if self.scheme == Scheme::ExactSpectral => {
                return Err(Error::validation(
                    "scheme",
                    "a potential file needs scheme = \"crank_nicolson\"",
                ))
            }
            _ => {}
        }
        let y = &self.y0;
        let given = [
            y.preset.is_some(),
            y.coefficients.is_some(),
            y.file.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if given != 1 {
            return Err(Error::validation(
                "y0",
                "give exactly one of `preset`, `coefficients`, `file`",
            ));
        }
        if let Some(c) = &y.coefficients {
            if c.len() > self.modes {
                return Err(Error::validation(
                    "y0.coefficients",
                    "more coefficients than modes",
                ));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("y0.coefficients", "must be finite"));
            }
        }
        for (field, path) in [
            ("potential.file", &self.potential.file),
            ("y0.file", &y.file),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(Error::validation(
                        field,
                        format!("{} does not exist", path.display()),
                    ));
                }
            }
        }
        self.dual.validate()?;
        self.game.validate()?;
        if !(self.relaxed.tolerance > 0.0) {
            return Err(Error::validation("relaxed.tolerance", "must be positive"));
        }
        Ok(())
    }

    /// Conjugate time exponent `q = p/(p-1)` of the dual problem.
    pub fn q(&self) -> f64 {
        conjugate_exponent(self.p.0).expect("validated exponent")
    }

    pub fn build_grid(&self) -> Result<Grid> {
        Grid::new(&self.grid.extents, &self.grid.counts)
    }

    pub fn build_params(&self) -> Result<PdeParams> {
        let grid = self.build_grid()?;
        let basis = EigenBasis::new(&grid, self.modes)?;
        let potential = match (&self.potential.constant, &self.potential.file) {
            (Some(c), _) if *c == 0.0 => Potential::Zero,
            (Some(c), _) => Potential::Stationary(Field::constant(grid.cell_count(), *c)),
            (None, Some(path)) => Potential::Stationary(read_field(path, &grid)?),
            (None, None) => Potential::Zero,
        };
        PdeParams::new(
            grid,
            basis,
            self.horizon,
            self.steps,
            potential,
            self.scheme,
        )
    }

    /// Initial state sampled on the grid of `params`.
    pub fn initial_state(&self, params: &PdeParams) -> Result<Field> {
        let grid = params.grid();
        if let Some(preset) = self.y0.preset {
            return Ok(preset_field(preset, grid, params.basis()));
        }
        if let Some(c) = &self.y0.coefficients {
            let mut v = Field::zeros(grid.cell_count());
            for (k, ck) in c.iter().enumerate() {
                let mode = params.basis().mode(k);
                v = v.zip_map(&mode, |a, b| a + ck * b);
            }
            return Ok(v);
        }
        let path = self.y0.file.as_ref().expect("validated initial state");
        read_field(path, grid)
    }
}

pub fn preset_field(preset: Preset, grid: &Grid, basis: &EigenBasis) -> Field {
    match preset {
        Preset::Mode1 => basis.mode(0),
        Preset::Bump => {
            let ext = grid.extents().to_vec();
            let radius = 0.2 * ext.iter().copied().fold(f64::INFINITY, f64::min);
            let raw = Field::from_fn(grid, |x| {
                let r2: f64 = x
                    .iter()
                    .zip(&ext)
                    .map(|(xi, l)| ((xi - 0.35 * l) / radius).powi(2))
                    .sum();
                if r2 < 1.0 {
                    (1.0 - 1.0 / (1.0 - r2)).exp()
                } else {
                    0.0
                }
            });
            let n = grid.norm(&raw);
            raw.scale(1.0 / n)
        }
    }
}
