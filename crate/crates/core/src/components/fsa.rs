//! Square-patrol finite state automaton for the rover.
//!
//! DRIVE goes straight until the rover is `side_length` from where the leg
//! started, then TURN steers at full lock (half speed) until the heading is
//! within `heading_tol` of the next quarter turn.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::rover::{DriveCommand, RoverState, PHI_MAX};
use super::normalize_angle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Drive,
    Turn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FsaState {
    pub mode: Mode,
    /// Current side of the square, 0..=3.
    pub leg: u8,
    pub leg_start: (f64, f64),
    pub target_heading: f64,
    /// Turns completed since the start.
    pub completed_legs: u32,
}

impl FsaState {
    /// Starts in DRIVE at `obs`, holding its current heading.
    pub fn start(obs: &RoverState) -> Self {
        FsaState {
            mode: Mode::Drive,
            leg: 0,
            leg_start: (obs.x, obs.y),
            target_heading: obs.theta,
            completed_legs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FsaParams {
    pub side_length: f64,
    pub heading_tol: f64,
    pub speed: f64,
}

impl FsaParams {
    pub fn with_speed(speed: f64) -> Self {
        FsaParams {
            speed,
            ..Default::default()
        }
    }
}

impl Default for FsaParams {
    fn default() -> Self {
        FsaParams {
            side_length: 10.0,
            heading_tol: 0.02,
            speed: 5.0,
        }
    }
}

/// One automaton tick. The returned command belongs to the mode after any
/// transition taken on this tick.
pub fn fsa_step(fsa: &FsaState, obs: &RoverState, params: &FsaParams) -> (FsaState, DriveCommand) {
    let mut next = *fsa;
    if next.mode == Mode::Drive {
        let travelled = (obs.x - next.leg_start.0).hypot(obs.y - next.leg_start.1);
        if travelled >= params.side_length {
            next.mode = Mode::Turn;
            next.target_heading = normalize_angle(next.target_heading + FRAC_PI_2);
        }
    }
    if next.mode == Mode::Turn {
        let error = normalize_angle(next.target_heading - obs.theta);
        if error.abs() < params.heading_tol {
            next.mode = Mode::Drive;
            next.leg = (next.leg + 1) % 4;
            next.leg_start = (obs.x, obs.y);
            next.completed_legs += 1;
        } else {
            let cmd = DriveCommand {
                v: params.speed / 2.0,
                phi: PHI_MAX * error.signum(),
            };
            return (next, cmd);
        }
    }
    (
        next,
        DriveCommand {
            v: params.speed,
            phi: 0.0,
        },
    )
}
