//! Lumped-parameter (0D) blood-flow simulation and calibration.
//!
//! The crate models a vascular network as a directed graph of resistive,
//! inductive, capacitive, and stenotic elements, integrates the resulting
//! differential-algebraic system over cardiac cycles, fits element parameters
//! to observed pressure/flow trajectories with a Levenberg-Marquardt solver,
//! and infers posterior distributions over outlet boundary-condition
//! parameters with an adaptive sequential Monte Carlo sampler.

pub mod elements;
pub mod error;
pub mod forward;
pub mod inverse;
pub mod model;
pub mod obs;
pub mod pipeline;
pub mod smc;
pub mod spline;

pub use error::{Error, Result};
