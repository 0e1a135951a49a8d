//! Random periodic solutions of tau-periodic semilinear SDEs with linear
//! multiplicative noise.
//!
//! The library samples two-sided Brownian paths, builds the explicit linear
//! cocycle and its exponential dichotomy, solves the coupled forward-backward
//! infinite-horizon random integral equation by damped fixed-point iteration,
//! integrates the SDE pathwise for cross-checks, and verifies the defining
//! random-periodicity identities statistically.

pub mod cocycle;
pub mod error;
pub mod export;
pub mod expm;
pub mod grid;
pub mod ihrie;
pub mod integrate;
pub mod models;
pub mod paths;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use paths::{sample_path, BrownianPath};
