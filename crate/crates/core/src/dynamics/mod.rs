//! Truth and filter dynamics.

pub mod clock;
pub mod elements;
pub mod gravity;
pub mod propagate;

use thiserror::Error;

pub use clock::{allan_variance_fit, clock_phi, clock_q, clock_transition, AllanSample, ClockState};
pub use elements::{
    mean_to_osculating, oe_to_roe, osculating_to_mean, roe_to_oe, OrbitalElements, RelativeOrbitalElements,
};
pub use gravity::{gravity_accel, sh_normalization, GravityField, RotationState};
pub use propagate::{propagate, AdaptiveOptions, ForceModel, Integrator, SpacecraftState, SunEphemeris};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("position at the origin")]
    OriginSingularity,
    #[error("adaptive integrator failed near t = {0}")]
    StepFailure(f64),
    #[error("invalid propagation step {0}")]
    InvalidStep(f64),
    #[error("Allan fit needs at least two distinct averaging times")]
    DegenerateFit,
    #[error("invalid gravity field: {0}")]
    InvalidField(String),
    #[error("gravity file: {0}")]
    Parse(String),
}
