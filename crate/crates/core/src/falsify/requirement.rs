use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FalsifyError;
use crate::trace::Trace;

/// `always <signal> > c` or `always <signal> < c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Requirement {
    AlwaysGt { signal: String, threshold: f64 },
    AlwaysLt { signal: String, threshold: f64 },
}

impl Requirement {
    pub fn signal(&self) -> &str {
        match self {
            Requirement::AlwaysGt { signal, .. } | Requirement::AlwaysLt { signal, .. } => signal,
        }
    }

    /// Signed margin of one value; negative means violated.
    pub fn margin(&self, value: f64) -> f64 {
        match self {
            Requirement::AlwaysGt { threshold, .. } => value - threshold,
            Requirement::AlwaysLt { threshold, .. } => threshold - value,
        }
    }
}

impl FromStr for Requirement {
    type Err = FalsifyError;

    fn from_str(text: &str) -> Result<Self, FalsifyError> {
        let bad = |why: &str| FalsifyError::InvalidRequirement(format!("{text:?}: {why}"));
        let words: Vec<&str> = text.split_whitespace().collect();
        let [always, signal, op, threshold] = words[..] else {
            return Err(bad("expected `always <signal> <op> <number>`"));
        };
        if always != "always" {
            return Err(bad("only `always` is supported"));
        }
        if !signal.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(bad("signal names are [A-Za-z0-9_]+"));
        }
        let threshold: f64 = threshold.parse().map_err(|_| bad("threshold is not a number"))?;
        if !threshold.is_finite() {
            return Err(bad("threshold must be finite"));
        }
        let signal = signal.to_string();
        match op {
            ">" => Ok(Requirement::AlwaysGt { signal, threshold }),
            "<" => Ok(Requirement::AlwaysLt { signal, threshold }),
            _ => Err(bad("operator must be > or <")),
        }
    }
}

impl fmt::Display for Requirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Requirement::AlwaysGt { signal, threshold } => write!(f, "always {signal} > {threshold:?}"),
            Requirement::AlwaysLt { signal, threshold } => write!(f, "always {signal} < {threshold:?}"),
        }
    }
}

impl TryFrom<String> for Requirement {
    type Error = FalsifyError;
    fn try_from(s: String) -> Result<Self, FalsifyError> {
        s.parse()
    }
}

impl From<Requirement> for String {
    fn from(r: Requirement) -> String {
        r.to_string()
    }
}

/// Minimum over time of the signed margin.
pub fn robustness(trace: &Trace, req: &Requirement) -> Result<f64, FalsifyError> {
    let samples = trace
        .signal(req.signal())
        .ok_or_else(|| FalsifyError::MissingSignal(req.signal().to_string()))?;
    if samples.is_empty() {
        return Err(FalsifyError::EmptyTrace(req.signal().to_string()));
    }
    Ok(samples
        .iter()
        .map(|&(_, v)| req.margin(v))
        .fold(f64::INFINITY, f64::min))
}
