//! Time-indexed named scalar signals.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("signal {0:?}: time stamps must strictly increase")]
    NonIncreasingTime(String),
    #[error("signal {0:?} has {1} samples, expected {2}")]
    LengthMismatch(String, usize, usize),
    #[error("signal {0:?} contains a non-finite value")]
    NonFinite(String),
    #[error("unknown signal {0:?}")]
    UnknownSignal(String),
}

/// Serialized as `{"signals": {name: [[t, value], ...]}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub signals: IndexMap<String, Vec<(f64, f64)>>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates empty signals in the given column order.
    pub fn with_signals<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Trace {
            signals: names.into_iter().map(|n| (n.into(), Vec::new())).collect(),
        }
    }

    pub fn push(&mut self, name: &str, t: f64, value: f64) {
        self.signals.entry(name.to_string()).or_default().push((t, value));
    }

    pub fn signal(&self, name: &str) -> Option<&[(f64, f64)]> {
        self.signals.get(name).map(Vec::as_slice)
    }

    pub fn values(&self, name: &str) -> Option<impl Iterator<Item = f64> + '_> {
        self.signals.get(name).map(|s| s.iter().map(|&(_, v)| v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.signals.keys().map(String::as_str)
    }

    /// Samples per signal (signals share a grid).
    pub fn len(&self) -> usize {
        self.signals.values().next().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.signals.get(name)?.last().map(|&(_, v)| v)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let expected = self.len();
        for (name, samples) in &self.signals {
            if samples.len() != expected {
                return Err(TraceError::LengthMismatch(name.clone(), samples.len(), expected));
            }
            if samples.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
                return Err(TraceError::NonFinite(name.clone()));
            }
            if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(TraceError::NonIncreasingTime(name.clone()));
            }
        }
        Ok(())
    }

    /// Keeps only `names`, in that order.
    pub fn select(&self, names: &[String]) -> Result<Trace, TraceError> {
        let mut out = Trace::new();
        for name in names {
            let samples = self
                .signals
                .get(name)
                .ok_or_else(|| TraceError::UnknownSignal(name.clone()))?;
            out.signals.insert(name.clone(), samples.clone());
        }
        Ok(out)
    }

    /// Table rows: time of the first signal, then every signal's value.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut row = Vec::with_capacity(self.signals.len() + 1);
                row.push(self.signals[0][i].0);
                row.extend(self.signals.values().map(|s| s[i].1));
                row
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let mut t = Trace::with_signals(["x", "y"]);
        t.push("x", 0.0, 1.0);
        t.push("y", 0.0, 2.5);
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            r#"{"signals":{"x":[[0.0,1.0]],"y":[[0.0,2.5]]}}"#
        );
        let back: Trace = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn validation() {
        let mut t = Trace::new();
        t.push("x", 0.0, 1.0);
        t.push("x", 0.0, 1.0);
        assert!(matches!(t.validate(), Err(TraceError::NonIncreasingTime(_))));
        let mut t = Trace::new();
        t.push("x", 0.0, 1.0);
        t.push("x", 1.0, 1.0);
        t.push("y", 0.0, 1.0);
        assert!(matches!(t.validate(), Err(TraceError::LengthMismatch(..))));
    }

    #[test]
    fn rows_and_select() {
        let mut t = Trace::new();
        for i in 0..3 {
            t.push("x", i as f64, 10.0 * i as f64);
            t.push("y", i as f64, -(i as f64));
        }
        let sel = t.select(&["y".to_string()]).unwrap();
        assert_eq!(sel.rows(), vec![vec![0.0, -0.0], vec![1.0, -1.0], vec![2.0, -2.0]]);
        assert!(t.select(&["z".to_string()]).is_err());
    }
}
