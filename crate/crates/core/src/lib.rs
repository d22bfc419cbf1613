//! Minimum-norm null controls and optimal actuator placement for the
//! internally controlled heat equation on intervals and rectangles.
//!
//! The crate is organised bottom-up:
//! [`grid`] discretizes the domain, [`heat`] propagates states and adjoints in
//! the Dirichlet eigenbasis, [`dual`] minimizes the dual functional and recovers
//! controls, [`bathtub`] solves the linear rearrangement problem, [`game`]
//! computes the placement game equilibrium, and [`config`], [`pipeline`],
//! [`output`] drive batch runs from a configuration file.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bathtub;
pub mod config;
pub mod dual;
pub mod error;
pub mod game;
pub mod grid;
pub mod heat;
pub mod output;
pub mod pipeline;

pub use error::{Error, Result};
pub use grid::{
    project_to_class, superlevel_measure, DensityClass, DensityClassSpec, EigenBasis, Field, Grid,
};
