//! Flat-earth geodesy and the noisy GPS relay.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::rng::NoiseRng;
use super::ComponentError;
use crate::transport::{MessageEnvelope, Topic};

pub const METERS_PER_DEGREE: f64 = 111_320.0;

/// Geodetic reference point for local east/north coordinates. Adequate for
/// sub-degree offsets.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoOrigin {
    pub lat: f64,
    pub lon: f64,
}

impl GeoOrigin {
    /// (east, north) in meters.
    pub fn to_local(&self, lat: f64, lon: f64) -> (f64, f64) {
        let east = (lon - self.lon) * METERS_PER_DEGREE * self.lat.to_radians().cos();
        let north = (lat - self.lat) * METERS_PER_DEGREE;
        (east, north)
    }

    /// (lat, lon) in degrees.
    pub fn to_geo(&self, east: f64, north: f64) -> (f64, f64) {
        let lat = self.lat + north / METERS_PER_DEGREE;
        let lon = self.lon + east / (METERS_PER_DEGREE * self.lat.to_radians().cos());
        (lat, lon)
    }
}

const NOISY_FIELDS: [&str; 3] = ["lat", "lon", "alt"];

/// Re-publishes a GPS fix on `output` with independent Gaussian(0, sigma)
/// noise added to lat, lon and alt (drawn in that order). Other payload
/// fields, `seq` and `stamp_ns` pass through. With `sigma == 0` the payload
/// is untouched and no draws are consumed.
pub fn gps_relay(
    input: &MessageEnvelope,
    output: &Topic,
    sigma: f64,
    rng: &mut NoiseRng,
) -> Result<MessageEnvelope, ComponentError> {
    let Value::Object(fields) = &input.payload else {
        return Err(ComponentError::SchemaViolation(
            "gps payload must be an object".into(),
        ));
    };
    for key in NOISY_FIELDS {
        if !fields.get(key).is_some_and(Value::is_number) {
            return Err(ComponentError::SchemaViolation(format!(
                "gps payload needs numeric {key:?}"
            )));
        }
    }
    let mut payload = input.payload.clone();
    if sigma != 0.0 {
        let map = payload.as_object_mut().expect("checked above");
        for key in NOISY_FIELDS {
            let raw = map[key].as_f64().expect("checked above");
            let noisy = raw + sigma * rng.normal();
            map.insert(
                key.to_string(),
                serde_json::Number::from_f64(noisy)
                    .map(Value::Number)
                    .ok_or(ComponentError::NonFiniteState)?,
            );
        }
    }
    Ok(MessageEnvelope::new(
        output.clone(),
        input.seq,
        input.stamp_ns,
        payload,
    ))
}
