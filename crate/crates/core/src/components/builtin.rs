//! Process components for the bundled component kinds.
//!
//! Each kind has a small typed config table that maps one-to-one onto
//! runner flags (`step_size` becomes `--step-size`).

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::process::{FirmwareProcessComponent, ProcessComponent};
use crate::transport::RemapTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Float,
    Integer,
    Bool,
    String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Param {
    pub name: &'static str,
    #[serde(rename = "type")]
    pub ty: ParamType,
    pub default: &'static str,
    pub description: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct KindInfo {
    pub name: &'static str,
    pub description: &'static str,
    /// Serves request/reply on an allocated port.
    pub firmware: bool,
    pub params: &'static [Param],
    /// Signals of the reply trace (firmware kinds).
    pub signals: &'static [&'static str],
}

const fn p(name: &'static str, ty: ParamType, default: &'static str, description: &'static str) -> Param {
    Param {
        name,
        ty,
        default,
        description,
    }
}

pub const KINDS: &[KindInfo] = &[
    KindInfo {
        name: "rover-plant",
        description: "Ackermann rover; publishes state {x,y,theta,t,step} and gps {lat,lon,alt,step}, steps on cmd {v,phi,step}",
        firmware: false,
        signals: &[],
        params: &[
            p("step_size", ParamType::Float, "0.01", "seconds per step"),
            p("iterations", ParamType::Integer, "10", "Euler sub-steps per step"),
            p("origin_lat", ParamType::Float, "0.0", "latitude of the local origin"),
            p("origin_lon", ParamType::Float, "0.0", "longitude of the local origin"),
        ],
    },
    KindInfo {
        name: "fsa-controller",
        description: "square-patrol controller; request {speed, duration?} replies with a trace of x,y,theta,v,phi",
        firmware: true,
        signals: &["x", "y", "theta", "v", "phi"],
        params: &[
            p("side_length", ParamType::Float, "10.0", "square side in meters"),
            p("heading_tol", ParamType::Float, "0.02", "turn completion tolerance in radians"),
            p("use_gps", ParamType::Bool, "false", "take position from gps instead of state"),
            p("origin_lat", ParamType::Float, "0.0", "latitude of the local origin"),
            p("origin_lon", ParamType::Float, "0.0", "longitude of the local origin"),
        ],
    },
    KindInfo {
        name: "gps-relay",
        description: "re-publishes gps fixes from input to output with Gaussian noise on lat, lon, alt",
        firmware: false,
        signals: &[],
        params: &[
            p("input", ParamType::String, "gps_raw", "topic to read"),
            p("output", ParamType::String, "gps", "topic to write"),
            p("sigma", ParamType::Float, "0.0", "noise standard deviation"),
            p("seed", ParamType::Integer, "scenario seed", "noise generator seed"),
        ],
    },
    KindInfo {
        name: "autopilot",
        description: "waypoint autopilot; request {mission: [{lat,lon,alt}], arrival_radius?, max_speed?, max_time?} replies with a trace of x,y,alt,wp_index",
        firmware: true,
        signals: &["x", "y", "alt", "wp_index"],
        params: &[
            p("step_size", ParamType::Float, "0.05", "seconds per control step"),
            p("iterations", ParamType::Integer, "1", "Euler sub-steps per step"),
        ],
    },
];

pub fn kind_info(name: &str) -> Option<&'static KindInfo> {
    KINDS.iter().find(|k| k.name == name)
}

#[derive(Debug, Error, PartialEq)]
pub enum BuiltinError {
    #[error("unknown component kind {0:?}")]
    UnknownKind(String),
    #[error("unknown config key {key:?} for kind {kind}")]
    UnknownKey { kind: String, key: String },
    #[error("config key {key:?} must be {expected:?}")]
    WrongType { key: String, expected: ParamType },
    #[error("{0}")]
    Invalid(String),
}

/// Runner arguments (after the kind) for a config table. Firmware kinds
/// get `--port {port}`; everything gets `--broker {broker}`.
pub fn builtin_args(kind: &str, config: &Map<String, Value>, seed: u64) -> Result<Vec<String>, BuiltinError> {
    let info = kind_info(kind).ok_or_else(|| BuiltinError::UnknownKind(kind.to_string()))?;
    for key in config.keys() {
        if !info.params.iter().any(|p| p.name == key) {
            return Err(BuiltinError::UnknownKey {
                kind: kind.to_string(),
                key: key.clone(),
            });
        }
    }
    let mut args = vec!["--broker".to_string(), "{broker}".to_string()];
    if info.firmware {
        args.extend(["--port".to_string(), "{port}".to_string()]);
    }
    for param in info.params {
        let flag = format!("--{}", param.name.replace('_', "-"));
        let value = match config.get(param.name) {
            Some(v) => v,
            None if param.name == "seed" => {
                args.extend([flag, seed.to_string()]);
                continue;
            }
            None => continue,
        };
        let wrong = || BuiltinError::WrongType {
            key: param.name.to_string(),
            expected: param.ty,
        };
        match param.ty {
            ParamType::Float => args.extend([flag, value.as_f64().ok_or_else(wrong)?.to_string()]),
            ParamType::Integer => {
                let n = match value {
                    Value::Number(n) if n.is_u64() => n.as_u64().unwrap(),
                    Value::Number(n) => {
                        let f = n.as_f64().ok_or_else(wrong)?;
                        if f.fract() != 0.0 || f < 0.0 {
                            return Err(wrong());
                        }
                        f as u64
                    }
                    _ => return Err(wrong()),
                };
                args.extend([flag, n.to_string()]);
            }
            ParamType::Bool => {
                if value.as_bool().ok_or_else(wrong)? {
                    args.push(flag);
                }
            }
            ParamType::String => args.extend([flag, value.as_str().ok_or_else(wrong)?.to_string()]),
        }
    }
    Ok(args)
}

/// A bundled kind ready to add to a process simulator.
#[derive(Debug, Clone)]
pub enum BuiltinComponent {
    Process(ProcessComponent),
    Firmware(FirmwareProcessComponent),
}

impl BuiltinComponent {
    pub fn new(kind: &str, config: &Map<String, Value>, remap: RemapTable, seed: u64) -> Result<Self, BuiltinError> {
        let args = builtin_args(kind, config, seed)?;
        let inner = ProcessComponent::builtin(kind).args(args).with_remap(remap);
        if kind_info(kind).is_some_and(|k| k.firmware) {
            let fw = FirmwareProcessComponent::new(inner)
                .map_err(|e| BuiltinError::Invalid(e.to_string()))?;
            Ok(BuiltinComponent::Firmware(fw))
        } else {
            Ok(BuiltinComponent::Process(inner))
        }
    }
}
