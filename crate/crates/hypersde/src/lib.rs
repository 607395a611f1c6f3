//! Stochastic control of an SDE driven through a hetero-directional hyperbolic PDE:
//! backstepping kernels, tracking, reduction to an input-delayed SDE, covariance floors,
//! controllers and Monte Carlo simulation.

pub mod checks;
pub mod config;
pub mod control;
pub mod covariance;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod reduction;
pub mod sim;
pub mod tracking;

pub use error::{Error, Result};
