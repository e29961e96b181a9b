//! Simulation and mean-field prediction of SGD and stochastic gradient flow
//! on high-dimensional random designs.

pub mod dmft;
pub mod error;
pub mod experiment;
pub mod grid_gp;
pub mod linreg_theory;
pub mod models;
pub mod parallel;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
