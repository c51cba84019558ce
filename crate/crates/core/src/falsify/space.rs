use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::FalsifyError;
use crate::components::NoiseRng;

/// Ordered bounded variables. Integer variables are rounded half-up after
/// drawing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct SampleSpace {
    variables: IndexMap<String, (f64, f64)>,
    #[serde(skip_serializing_if = "BTreeSet::is_empty")]
    integer_vars: BTreeSet<String>,
}

#[derive(Deserialize)]
struct RawSpace {
    variables: IndexMap<String, (f64, f64)>,
    #[serde(default)]
    integer_vars: BTreeSet<String>,
}

impl TryFrom<RawSpace> for SampleSpace {
    type Error = FalsifyError;

    fn try_from(raw: RawSpace) -> Result<Self, FalsifyError> {
        let space = SampleSpace {
            variables: raw.variables,
            integer_vars: raw.integer_vars,
        };
        space.validate()?;
        Ok(space)
    }
}

impl SampleSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_var(mut self, name: &str, low: f64, high: f64) -> Result<Self, FalsifyError> {
        if self.variables.contains_key(name) {
            return Err(FalsifyError::InvalidSpace(format!("duplicate variable {name:?}")));
        }
        self.variables.insert(name.to_string(), (low, high));
        self.validate()?;
        Ok(self)
    }

    pub fn with_integer(mut self, name: &str, low: f64, high: f64) -> Result<Self, FalsifyError> {
        self.integer_vars.insert(name.to_string());
        self.with_var(name, low, high)
    }

    pub fn validate(&self) -> Result<(), FalsifyError> {
        for (name, &(low, high)) in &self.variables {
            if name.is_empty() {
                return Err(FalsifyError::InvalidSpace("empty variable name".into()));
            }
            if !(low.is_finite() && high.is_finite() && low < high) {
                return Err(FalsifyError::InvalidSpace(format!(
                    "{name}: need finite low < high, got ({low}, {high})"
                )));
            }
            if self.integer_vars.contains(name) && low.ceil() > high.floor() {
                return Err(FalsifyError::InvalidSpace(format!(
                    "{name}: no integer in ({low}, {high})"
                )));
            }
        }
        for name in &self.integer_vars {
            if !self.variables.contains_key(name) {
                return Err(FalsifyError::UnknownVariable(name.clone()));
            }
        }
        Ok(())
    }

    pub fn variables(&self) -> impl Iterator<Item = (&str, (f64, f64))> {
        self.variables.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn bounds(&self, name: &str) -> Option<(f64, f64)> {
        self.variables.get(name).copied()
    }

    pub fn is_integer(&self, name: &str) -> bool {
        self.integer_vars.contains(name)
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }
}

/// One assignment of every space variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sample {
    pub values: IndexMap<String, f64>,
}

impl Sample {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

/// Draws each variable independently and uniformly, in space order, one
/// generator draw per variable.
pub fn sample_uniform(space: &SampleSpace, rng: &mut NoiseRng) -> Sample {
    let values = space
        .variables
        .iter()
        .map(|(name, &(low, high))| {
            let mut v = (low + (high - low) * rng.uniform()).clamp(low, high);
            if space.integer_vars.contains(name) {
                v = (v + 0.5).floor().clamp(low.ceil(), high.floor());
            }
            (name.clone(), v)
        })
        .collect();
    Sample { values }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn campaign_space() -> SampleSpace {
        SampleSpace::new()
            .with_integer("iters", 1.0, 100.0)
            .unwrap()
            .with_var("step_size", 0.001, 0.01)
            .unwrap()
            .with_var("alt", 25.0, 50.0)
            .unwrap()
    }

    #[test]
    fn tiny_range_stays_in_bounds() {
        let space = SampleSpace::new().with_var("x", 0.0, 1e-12).unwrap();
        let mut rng = NoiseRng::seed_from(3);
        for _ in 0..1000 {
            let v = sample_uniform(&space, &mut rng).get("x").unwrap();
            assert!((0.0..=1e-12).contains(&v));
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let space = campaign_space();
        let a = sample_uniform(&space, &mut NoiseRng::seed_from(7));
        let b = sample_uniform(&space, &mut NoiseRng::seed_from(7));
        assert_eq!(a, b);
        let iters = a.get("iters").unwrap();
        assert_eq!(iters.fract(), 0.0);
        assert_eq!(a.values.keys().collect::<Vec<_>>(), ["iters", "step_size", "alt"]);
    }

    #[test]
    fn mean_within_clt_bound() {
        let space = SampleSpace::new().with_var("alt", 25.0, 50.0).unwrap();
        let mut rng = NoiseRng::seed_from(11);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_uniform(&space, &mut rng).get("alt").unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 37.5).abs() <= 0.15, "{mean}");
    }

    #[test]
    fn rounding_is_half_up() {
        let space = SampleSpace::new().with_integer("n", 0.0, 3.0).unwrap();
        let mut rng = NoiseRng::seed_from(1);
        let mut seen = [0usize; 4];
        for _ in 0..10_000 {
            seen[sample_uniform(&space, &mut rng).get("n").unwrap() as usize] += 1;
        }
        // endpoints get half-width buckets
        assert!(seen[0] < seen[1] && seen[3] < seen[2], "{seen:?}");
    }

    #[test]
    fn invalid_spaces() {
        assert!(SampleSpace::new().with_var("x", 1.0, 1.0).is_err());
        assert!(SampleSpace::new().with_var("x", 2.0, 1.0).is_err());
        assert!(SampleSpace::new().with_var("x", 0.0, f64::INFINITY).is_err());
        assert!(SampleSpace::new().with_integer("n", 1.2, 1.8).is_err());
        let dup = SampleSpace::new().with_var("x", 0.0, 1.0).unwrap().with_var("x", 0.0, 2.0);
        assert!(dup.is_err());
        let json = r#"{"variables": {"a": [0, 1]}, "integer_vars": ["b"]}"#;
        assert!(serde_json::from_str::<SampleSpace>(json).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let space = campaign_space();
        let text = serde_json::to_string(&space).unwrap();
        assert_eq!(serde_json::from_str::<SampleSpace>(&text).unwrap(), space);
    }
}
