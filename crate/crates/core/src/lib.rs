//! Slow-fast stochastic two-box ocean model with eddy forcing.
//!
//! The crate simulates the five-variable model in which fast Ornstein–Uhlenbeck
//! eddy variables drive heat and salt exchange between two boxes, together
//! with its averaged and Gaussian-homogenized two-variable reductions, and
//! provides the Monte Carlo machinery to compare their climatologies,
//! rare-event probabilities and regime-transition statistics.

pub mod cli;
pub mod ensemble;
pub mod equilibria;
pub mod homogenization;
pub mod integrator;
pub mod linalg;
pub mod lyapunov;
pub mod model;
pub mod noise;
pub mod params;
pub mod statistics;
pub mod verify;

pub use model::{State, Variant};
pub use noise::StreamSeed;
pub use params::{DimensionalScales, ModelParams};
