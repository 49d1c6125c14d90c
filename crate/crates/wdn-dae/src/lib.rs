//! Differential-algebraic hydraulic model of water distribution networks, with
//! linearization, stability and authority margins, and quasi-steady comparison.

pub mod config;
pub mod dae;
pub mod error;
pub mod inp;
pub mod linearization;
pub mod margins;
pub mod network;
pub mod quasi_steady;
pub mod schedule;
pub mod smoothing;
mod solver;
pub mod trajectory;
pub mod units;

pub use error::{Error, Result};
pub use solver::NewtonSettings;
