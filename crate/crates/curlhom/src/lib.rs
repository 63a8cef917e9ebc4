//! Spectral toolkit for periodic two-scale homogenization of stationary
//! Maxwell systems.
//!
//! The crate is organised bottom-up: periodic grids and trigonometric
//! collocation calculus (`grid`, `field`, `spectral`), coefficient models
//! (`coeff`), cell-problem solvers and correctors (`cell`), effective tensors
//! (`effective`), the Maxwell operator and its resolvent (`maxwell`),
//! two-scale corrector expansions (`twoscale`, `expansion`), and the scenario
//! harness with its CLI-facing config and report formats (`config`,
//! `harness`, `report`).

pub mod cell;
pub mod coeff;
pub mod config;
pub mod effective;
pub mod error;
pub mod expansion;
pub mod field;
pub mod grid;
pub mod harness;
pub mod maxwell;
pub mod report;
pub mod spectral;
pub mod twoscale;

pub use error::{CurlhomError, Result};
