//! Simulation and order-preservation tooling for neutral stochastic
//! functional differential equations driven by G-Brownian motion.

pub mod cli;
pub mod coeffs;
pub mod comparison;
pub mod drivers;
pub mod error;
pub mod expr;
pub mod gcalc;
pub mod gexp;
pub mod segments;
pub mod solver;

pub use error::{Error, Result};
