//! Desk-scale simulation components.
//!
//! Every model here is a pure stepping function that tests can drive
//! directly; [`runtime`] wraps them into processes speaking the transport
//! protocol, and [`builtin`] builds the matching process components.
//!
//! Constants are arbitrary but fixed: wheelbase 2.0 m, steering limit
//! 0.6 rad, pursuit gain 1.0 1/s, arrival radius 1.0 m.

pub mod autopilot;
pub mod builtin;
pub mod fsa;
pub mod gps;
pub mod rng;
pub mod rover;
pub mod runtime;

use thiserror::Error;

pub use autopilot::{autopilot_step, run_mission, AutopilotStep, MissionConfig, VehicleState, Waypoint};
pub use fsa::{fsa_step, FsaParams, FsaState, Mode};
pub use gps::{gps_relay, GeoOrigin, METERS_PER_DEGREE};
pub use rng::NoiseRng;
pub use rover::{rover_step, DriveCommand, PhysicsConfig, RoverState, PHI_MAX, WHEELBASE};

#[derive(Debug, Error, PartialEq)]
pub enum ComponentError {
    #[error("state became non-finite")]
    NonFiniteState,
    #[error("payload schema violation: {0}")]
    SchemaViolation(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}
