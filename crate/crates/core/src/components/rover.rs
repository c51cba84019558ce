//! Kinematic bicycle model of an Ackermann-steered rover.
//!
//! x' = v cos(theta), y' = v sin(theta), theta' = (v / L) tan(phi),
//! integrated with forward Euler.

use serde::{Deserialize, Serialize};

use super::{normalize_angle, ComponentError};

pub const WHEELBASE: f64 = 2.0;
pub const PHI_MAX: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoverState {
    pub x: f64,
    pub y: f64,
    /// Heading in (-pi, pi].
    pub theta: f64,
    /// Steering angle, |phi| <= PHI_MAX.
    pub phi: f64,
    pub v: f64,
    pub t: f64,
}

impl RoverState {
    fn is_finite(&self) -> bool {
        [self.x, self.y, self.theta, self.phi, self.v, self.t]
            .iter()
            .all(|f| f.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveCommand {
    pub v: f64,
    pub phi: f64,
}

/// Integrator fidelity: `iterations` Euler sub-steps per `step_size` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    pub step_size: f64,
    pub iterations: u32,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            step_size: 0.01,
            iterations: 10,
        }
    }
}

impl PhysicsConfig {
    pub fn new(step_size: f64, iterations: u32) -> Result<Self, ComponentError> {
        let cfg = PhysicsConfig {
            step_size,
            iterations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ComponentError> {
        if !(1e-6..=1.0).contains(&self.step_size) {
            return Err(ComponentError::InvalidConfig(format!(
                "step_size {} outside [1e-6, 1.0]",
                self.step_size
            )));
        }
        if !(1..=10_000).contains(&self.iterations) {
            return Err(ComponentError::InvalidConfig(format!(
                "iterations {} outside [1, 10000]",
                self.iterations
            )));
        }
        Ok(())
    }

    /// Euler sub-step length.
    pub fn substep(&self) -> f64 {
        self.step_size / self.iterations as f64
    }

    /// Sub-steps per simulated second.
    pub fn cost(&self) -> f64 {
        self.iterations as f64 / self.step_size
    }
}

pub fn rover_step(
    state: &RoverState,
    cmd: DriveCommand,
    cfg: &PhysicsConfig,
) -> Result<RoverState, ComponentError> {
    if !cmd.v.is_finite() || !cmd.phi.is_finite() {
        return Err(ComponentError::NonFiniteState);
    }
    cfg.validate()?;
    let mut next = *state;
    next.v = cmd.v;
    next.phi = cmd.phi.clamp(-PHI_MAX, PHI_MAX);
    let h = cfg.substep();
    let yaw_rate = next.v / WHEELBASE * next.phi.tan();
    for _ in 0..cfg.iterations {
        let (sin, cos) = next.theta.sin_cos();
        next.x += h * next.v * cos;
        next.y += h * next.v * sin;
        next.theta += h * yaw_rate;
    }
    next.theta = normalize_angle(next.theta);
    next.t += cfg.step_size;
    if !next.is_finite() {
        return Err(ComponentError::NonFiniteState);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straightforward fine-step Euler written independently of `rover_step`.
    fn reference(v: f64, phi: f64, duration: f64, h: f64) -> (f64, f64, f64) {
        let n = (duration / h).round() as usize;
        let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..n {
            let (dx, dy, dth) = (v * th.cos(), v * th.sin(), v / 2.0 * phi.tan());
            x += h * dx;
            y += h * dy;
            th += h * dth;
        }
        (x, y, th)
    }

    #[test]
    fn zero_velocity_only_advances_time() {
        let s = RoverState {
            x: 1.0,
            y: -2.0,
            theta: 0.3,
            ..Default::default()
        };
        let cfg = PhysicsConfig::new(0.1, 5).unwrap();
        let n = rover_step(&s, DriveCommand { v: 0.0, phi: 0.2 }, &cfg).unwrap();
        assert_eq!((n.x, n.y, n.theta), (s.x, s.y, s.theta));
        assert!((n.t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn straight_line() {
        let cfg = PhysicsConfig::new(1.0, 1).unwrap();
        let n = rover_step(&RoverState::default(), DriveCommand { v: 1.0, phi: 0.0 }, &cfg).unwrap();
        assert_eq!((n.x, n.y, n.theta), (1.0, 0.0, 0.0));
    }

    #[test]
    fn steering_is_clamped() {
        let cfg = PhysicsConfig::default();
        let n = rover_step(&RoverState::default(), DriveCommand { v: 1.0, phi: 2.0 }, &cfg).unwrap();
        assert_eq!(n.phi, PHI_MAX);
    }

    #[test]
    fn matches_fine_reference() {
        let cfg = PhysicsConfig::new(0.01, 10).unwrap();
        let mut s = RoverState::default();
        for _ in 0..100 {
            s = rover_step(&s, DriveCommand { v: 5.0, phi: 0.3 }, &cfg).unwrap();
        }
        let (x, y, th) = reference(5.0, 0.3, 1.0, 1e-5);
        assert!(((s.x - x).powi(2) + (s.y - y).powi(2)).sqrt() < 1e-2);
        assert!((normalize_angle(s.theta - th)).abs() < 1e-2);
    }

    #[test]
    fn invalid_config_and_non_finite() {
        assert!(PhysicsConfig::new(0.0, 1).is_err());
        assert!(PhysicsConfig::new(0.01, 0).is_err());
        assert!(PhysicsConfig::new(2.0, 1).is_err());
        let cfg = PhysicsConfig::default();
        assert_eq!(
            rover_step(&RoverState::default(), DriveCommand { v: f64::NAN, phi: 0.0 }, &cfg),
            Err(ComponentError::NonFiniteState)
        );
        let huge = RoverState {
            x: f64::MAX,
            ..Default::default()
        };
        assert_eq!(
            rover_step(&huge, DriveCommand { v: 1e300, phi: 0.0 }, &cfg),
            Err(ComponentError::NonFiniteState)
        );
    }
}
