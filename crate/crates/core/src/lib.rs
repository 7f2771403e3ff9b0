//! Simulation engine for generative ad auctions.
//!
//! A language model that writes ads into its answers is replaced by a
//! finite response space and a softmax policy over it. That makes the
//! KL-regularized optimal allocation, first-price payments and the usual
//! incentive properties exactly computable, so they can be tested rather
//! than estimated.

pub mod agents;
pub mod ctr_model;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod irpo;
pub mod mechanism;
pub mod numerics;
pub mod properties;
pub mod seeding;
pub mod setting;
pub mod user_model;

pub use error::{Error, Result};
pub use setting::Setting;

/// Version string recorded in reports.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
