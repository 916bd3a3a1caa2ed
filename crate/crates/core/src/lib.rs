//! Bilinear optimal control of a stochastic nonlinear Schrödinger equation
//! with conservative multiplicative noise.
//!
//! The crate provides a split-step Fourier solver for the controlled state
//! equation, its tangent-linear and adjoint sweeps, Monte-Carlo cost and
//! gradient estimators on common random numbers, and a projected gradient
//! method for the control.

pub mod error;
pub mod adjoint;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod model;
pub mod optimizer;
pub mod paths;
pub mod probes;
pub mod space;

pub use error::{Error, Result};
