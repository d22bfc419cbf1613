#![allow(dead_code)]

use placement_core::config::{parse_config, RunConfig};
use placement_core::heat::{PdeParams, Potential, Scheme};
use placement_core::{EigenBasis, Grid};

pub fn params_1d(cells: usize, modes: usize, steps: usize, horizon: f64) -> PdeParams {
    let g = Grid::new(&[1.0], &[cells]).unwrap();
    let b = EigenBasis::new(&g, modes).unwrap();
    PdeParams::new(g, b, horizon, steps, Potential::Zero, Scheme::ExactSpectral).unwrap()
}

/// Benchmark run at the default resolution: 128 cells, T = 0.1, α = 0.5.
pub fn benchmark(y0: &str, extra: &str) -> RunConfig {
    let text = format!(
        "horizon = 0.1\nalpha = 0.5\n{extra}\n[grid]\nextents = [1.0]\ncounts = [128]\n\n[y0]\n{y0}\n"
    );
    parse_config(&text).unwrap()
}

pub fn mode1(extra: &str) -> RunConfig {
    benchmark("preset = \"mode1\"", extra)
}

pub fn bump(extra: &str) -> RunConfig {
    benchmark("preset = \"bump\"", extra)
}
