//! Waypoint-following autopilot: proportional pursuit toward each waypoint
//! in local flat-earth coordinates.

use serde::{Deserialize, Serialize};

use super::gps::GeoOrigin;
use super::rover::PhysicsConfig;
use super::ComponentError;
use crate::trace::Trace;

/// Pursuit gain (1/s).
pub const PURSUIT_GAIN: f64 = 1.0;
pub const DEFAULT_ARRIVAL_RADIUS: f64 = 1.0;
pub const DEFAULT_MAX_SPEED: f64 = 15.0;
pub const DEFAULT_MAX_TIME: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

impl Waypoint {
    pub fn new(lat: f64, lon: f64, alt: f64) -> Result<Self, ComponentError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) || !alt.is_finite() {
            return Err(ComponentError::InvalidConfig(format!(
                "waypoint ({lat}, {lon}, {alt}) out of range"
            )));
        }
        Ok(Waypoint { lat, lon, alt })
    }

    /// Clamps lat to [-90, 90] and lon to [-180, 180].
    pub fn clamped(lat: f64, lon: f64, alt: f64) -> Self {
        Waypoint {
            lat: lat.clamp(-90.0, 90.0),
            lon: lon.clamp(-180.0, 180.0),
            alt,
        }
    }
}

fn default_arrival_radius() -> f64 {
    DEFAULT_ARRIVAL_RADIUS
}

fn default_max_speed() -> f64 {
    DEFAULT_MAX_SPEED
}

fn default_max_time() -> f64 {
    DEFAULT_MAX_TIME
}

/// Mission request: `{mission: [{lat, lon, alt}], arrival_radius?, max_speed?, max_time?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionConfig {
    pub mission: Vec<Waypoint>,
    #[serde(default = "default_arrival_radius")]
    pub arrival_radius: f64,
    #[serde(default = "default_max_speed")]
    pub max_speed: f64,
    /// Simulated-time budget in seconds.
    #[serde(default = "default_max_time", alias = "duration")]
    pub max_time: f64,
    #[serde(default)]
    pub home: GeoOrigin,
}

impl MissionConfig {
    pub fn new(mission: Vec<Waypoint>) -> Self {
        MissionConfig {
            mission,
            arrival_radius: DEFAULT_ARRIVAL_RADIUS,
            max_speed: DEFAULT_MAX_SPEED,
            max_time: DEFAULT_MAX_TIME,
            home: GeoOrigin::default(),
        }
    }

    /// Parses a request document, clamping waypoint coordinates into range.
    pub fn from_request(doc: &serde_json::Value) -> Result<Self, ComponentError> {
        let mut cfg: MissionConfig = serde_json::from_value(doc.clone())
            .map_err(|e| ComponentError::InvalidConfig(e.to_string()))?;
        for wp in &mut cfg.mission {
            *wp = Waypoint::clamped(wp.lat, wp.lon, wp.alt);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ComponentError> {
        if self.mission.is_empty() {
            return Err(ComponentError::InvalidConfig("mission has no waypoints".into()));
        }
        for wp in &self.mission {
            Waypoint::new(wp.lat, wp.lon, wp.alt)?;
        }
        if !(self.arrival_radius > 0.0 && self.max_speed > 0.0 && self.max_time > 0.0) {
            return Err(ComponentError::InvalidConfig(
                "arrival_radius, max_speed and max_time must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Waypoints in local (east, north, up) meters.
    pub fn local_targets(&self) -> Vec<[f64; 3]> {
        self.mission
            .iter()
            .map(|wp| {
                let (e, n) = self.home.to_local(wp.lat, wp.lon);
                [e, n, wp.alt]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutopilotStep {
    pub state: VehicleState,
    pub wp_index: usize,
    pub done: bool,
}

fn distance(state: &VehicleState, target: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (target[0] - state.x, target[1] - state.y, target[2] - state.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Advances one control step toward waypoint `wp_index`.
///
/// If the vehicle is already inside the arrival radius of the last waypoint
/// nothing moves and `done` is set.
pub fn autopilot_step(
    state: &VehicleState,
    wp_index: usize,
    mission: &MissionConfig,
    cfg: &PhysicsConfig,
) -> Result<AutopilotStep, ComponentError> {
    cfg.validate()?;
    let targets = mission.local_targets();
    let last = targets.len().checked_sub(1).ok_or_else(|| {
        ComponentError::InvalidConfig("mission has no waypoints".into())
    })?;
    let mut idx = wp_index.min(last);
    if distance(state, &targets[idx]) <= mission.arrival_radius {
        if idx == last {
            return Ok(AutopilotStep {
                state: *state,
                wp_index: idx,
                done: true,
            });
        }
        idx += 1;
    }

    let target = targets[idx];
    let h = cfg.substep();
    let mut next = *state;
    for _ in 0..cfg.iterations {
        let (dx, dy) = (target[0] - next.x, target[1] - next.y);
        let horizontal = dx.hypot(dy);
        if horizontal > 0.0 {
            let speed = mission.max_speed.min(PURSUIT_GAIN * horizontal);
            next.x += h * speed * dx / horizontal;
            next.y += h * speed * dy / horizontal;
        }
        let climb = (PURSUIT_GAIN * (target[2] - next.z)).clamp(-mission.max_speed, mission.max_speed);
        next.z += h * climb;
    }
    next.t += cfg.step_size;
    if ![next.x, next.y, next.z, next.t].iter().all(|v| v.is_finite()) {
        return Err(ComponentError::NonFiniteState);
    }

    let mut done = false;
    if distance(&next, &target) <= mission.arrival_radius {
        if idx == last {
            done = true;
        } else {
            idx += 1;
        }
    }
    Ok(AutopilotStep {
        state: next,
        wp_index: idx,
        done,
    })
}

#[derive(Debug, Clone)]
pub struct MissionOutcome {
    pub trace: Trace,
    pub final_state: VehicleState,
    pub completed: bool,
}

/// Flies the mission from the home position on the ground until the last
/// waypoint is reached or `mission.max_time` elapses.
///
/// The trace holds the state after every control step (signals `x`, `y`,
/// `alt`, `wp_index`); it has a single `t = 0` sample if no step was needed.
pub fn run_mission(mission: &MissionConfig, cfg: &PhysicsConfig) -> Result<MissionOutcome, ComponentError> {
    mission.validate()?;
    cfg.validate()?;
    let mut trace = Trace::with_signals(["x", "y", "alt", "wp_index"]);
    let mut state = VehicleState::default();
    let mut idx = 0;
    let max_steps = (mission.max_time / cfg.step_size).floor() as u64;
    let mut completed = false;
    for k in 1..=max_steps {
        let step = autopilot_step(&state, idx, mission, cfg)?;
        if step.done && step.state == state {
            completed = true;
            break;
        }
        state = step.state;
        idx = step.wp_index;
        let t = k as f64 * cfg.step_size;
        trace.push("x", t, state.x);
        trace.push("y", t, state.y);
        trace.push("alt", t, state.z);
        trace.push("wp_index", t, idx as f64);
        if step.done {
            completed = true;
            break;
        }
    }
    if trace.is_empty() {
        trace.push("x", 0.0, state.x);
        trace.push("y", 0.0, state.y);
        trace.push("alt", 0.0, state.z);
        trace.push("wp_index", 0.0, idx as f64);
    }
    Ok(MissionOutcome {
        trace,
        final_state: state,
        completed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_waypoint_mission() -> MissionConfig {
        MissionConfig::new(vec![Waypoint::new(0.025, -0.018, 25.0).unwrap()])
    }

    #[test]
    fn already_arrived_is_done_immediately() {
        let mission = MissionConfig::new(vec![Waypoint::new(0.0, 0.0, 0.5).unwrap()]);
        let step = autopilot_step(&VehicleState::default(), 0, &mission, &PhysicsConfig::default()).unwrap();
        assert!(step.done);
        assert_eq!(step.wp_index, 0);
        assert_eq!(step.state, VehicleState::default());
    }

    #[test]
    fn reaches_waypoint_target() {
        let cfg = PhysicsConfig::new(0.05, 1).unwrap();
        let outcome = run_mission(&single_waypoint_mission(), &cfg).unwrap();
        assert!(outcome.completed);
        let s = outcome.final_state;
        let err = ((s.x + 2003.76).powi(2) + (s.y - 2783.0).powi(2) + (s.z - 25.0).powi(2)).sqrt();
        assert!(err <= 1.0, "{err}");
        assert!(outcome.trace.len() < 100_000);
        assert!(outcome.trace.values("alt").unwrap().all(|a| a > 0.0));
        outcome.trace.validate().unwrap();
    }

    #[test]
    fn multiple_waypoints_advance_index() {
        let mission = MissionConfig::new(vec![
            Waypoint::new(0.0, 0.0001, 5.0).unwrap(),
            Waypoint::new(0.0001, 0.0001, 5.0).unwrap(),
        ]);
        let outcome = run_mission(&mission, &PhysicsConfig::new(0.05, 2).unwrap()).unwrap();
        assert!(outcome.completed);
        assert_eq!(outcome.trace.last("wp_index"), Some(1.0));
    }

    #[test]
    fn request_parsing_clamps_latitude() {
        let doc = serde_json::json!({"mission": [{"lat": 170.0, "lon": -200.0, "alt": 30.0}]});
        let cfg = MissionConfig::from_request(&doc).unwrap();
        assert_eq!(cfg.mission[0].lat, 90.0);
        assert_eq!(cfg.mission[0].lon, -180.0);
        assert_eq!(cfg.arrival_radius, 1.0);
        assert!(MissionConfig::from_request(&serde_json::json!({"mission": []})).is_err());
        assert!(Waypoint::new(91.0, 0.0, 0.0).is_err());
    }
}
