//! Experiment orchestration: configuration, mechanism comparison, property
//! verification, equilibrium runs and click simulation.

mod compare;
mod config;
mod runs;
mod verify;

pub use compare::*;
pub use config::*;
pub use runs::*;
pub use verify::*;
