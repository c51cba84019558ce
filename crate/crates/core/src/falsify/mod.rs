//! Search-based falsification over bounded static inputs.
//!
//! A [`SampleSpace`] mixes system inputs (targets, speeds) with fidelity knobs
//! (integrator step size, sub-step iterations). [`run_test`] draws samples,
//! evaluates a model for each and scores the resulting trace against a
//! [`Requirement`]; [`lowest_fidelity_falsifier`] then picks the cheapest
//! simulator configuration that still violated it.

mod requirement;
mod space;

use std::cmp::Ordering;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::components::NoiseRng;
use crate::trace::Trace;

pub use requirement::{robustness, Requirement};
pub use space::{sample_uniform, Sample, SampleSpace};

#[derive(Debug, Error)]
pub enum FalsifyError {
    #[error("invalid sample space: {0}")]
    InvalidSpace(String),
    #[error("invalid requirement {0}")]
    InvalidRequirement(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("signal {0:?} not in trace")]
    MissingSignal(String),
    #[error("signal {0:?} has no samples")]
    EmptyTrace(String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("all {0} evaluations failed; first error: {1}")]
    AllEvaluationsFailed(usize, String),
    #[error("writing trace {path}: {source}")]
    TraceOutput {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestOptions {
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub parallelism: usize,
    /// When set, each evaluation's trace is written here as JSON.
    #[serde(default, skip)]
    pub trace_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}

impl TestOptions {
    pub fn new(iterations: usize, seed: u64) -> Self {
        TestOptions {
            iterations,
            seed,
            parallelism: 1,
            trace_dir: None,
        }
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn with_trace_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.trace_dir = Some(dir.into());
        self
    }

    pub fn validate(&self) -> Result<(), FalsifyError> {
        if self.iterations == 0 {
            return Err(FalsifyError::InvalidOptions("iterations must be >= 1".into()));
        }
        if self.parallelism == 0 {
            return Err(FalsifyError::InvalidOptions("parallelism must be >= 1".into()));
        }
        Ok(())
    }
}

/// Something that turns a sample into a trace.
pub trait Model: Sync {
    fn evaluate(&self, sample: &Sample) -> Result<Trace, String>;
}

impl<F> Model for F
where
    F: Fn(&Sample) -> Result<Trace, String> + Sync,
{
    fn evaluate(&self, sample: &Sample) -> Result<Trace, String> {
        self(sample)
    }
}

/// Produces the full sample stream before any evaluation runs.
pub trait Optimizer {
    fn samples(&self, space: &SampleSpace, options: &TestOptions) -> Vec<Sample>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UniformRandom;

impl Optimizer for UniformRandom {
    fn samples(&self, space: &SampleSpace, options: &TestOptions) -> Vec<Sample> {
        let mut rng = NoiseRng::seed_from(options.seed);
        (0..options.iterations).map(|_| sample_uniform(space, &mut rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sample: Sample,
    /// `+inf` when the model failed.
    #[serde(with = "finite_or_null")]
    pub robustness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

mod finite_or_null {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub requirement: Requirement,
    pub options: TestOptions,
    pub space: SampleSpace,
    pub evaluations: Vec<Evaluation>,
    pub best: usize,
    pub falsified: bool,
}

impl TestResult {
    pub fn best_evaluation(&self) -> &Evaluation {
        &self.evaluations[self.best]
    }

    pub fn best_robustness(&self) -> f64 {
        self.best_evaluation().robustness
    }

    pub fn failures(&self) -> usize {
        self.evaluations.iter().filter(|e| e.error.is_some()).count()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result is serializable");
        s.push('\n');
        s
    }
}

/// Draws samples uniformly and evaluates them.
pub fn run_test(
    model: &dyn Model,
    req: &Requirement,
    space: &SampleSpace,
    options: &TestOptions,
) -> Result<TestResult, FalsifyError> {
    run_test_with(&UniformRandom, model, req, space, options)
}

pub fn run_test_with(
    optimizer: &dyn Optimizer,
    model: &dyn Model,
    req: &Requirement,
    space: &SampleSpace,
    options: &TestOptions,
) -> Result<TestResult, FalsifyError> {
    space.validate()?;
    options.validate()?;
    if let Some(dir) = &options.trace_dir {
        std::fs::create_dir_all(dir).map_err(|source| FalsifyError::TraceOutput {
            path: dir.clone(),
            source,
        })?;
    }
    let samples = optimizer.samples(space, options);
    let evaluate = |(i, sample): (usize, &Sample)| evaluate_one(i, sample, model, req, options);
    let evaluations: Result<Vec<Evaluation>, FalsifyError> = if options.parallelism == 1 {
        samples.iter().enumerate().map(evaluate).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallelism)
            .build()
            .map_err(|e| FalsifyError::InvalidOptions(e.to_string()))?;
        pool.install(|| samples.par_iter().enumerate().map(evaluate).collect())
    };
    let evaluations = evaluations?;

    let mut best = 0;
    for (i, e) in evaluations.iter().enumerate() {
        if e.robustness < evaluations[best].robustness {
            best = i;
        }
    }
    if evaluations[best].robustness == f64::INFINITY {
        let first = evaluations
            .iter()
            .find_map(|e| e.error.clone())
            .unwrap_or_else(|| "robustness is +inf".into());
        return Err(FalsifyError::AllEvaluationsFailed(evaluations.len(), first));
    }
    let falsified = evaluations[best].robustness < 0.0;
    Ok(TestResult {
        requirement: req.clone(),
        options: options.clone(),
        space: space.clone(),
        evaluations,
        best,
        falsified,
    })
}

fn evaluate_one(
    index: usize,
    sample: &Sample,
    model: &dyn Model,
    req: &Requirement,
    options: &TestOptions,
) -> Result<Evaluation, FalsifyError> {
    let scored = model
        .evaluate(sample)
        .and_then(|trace| match robustness(&trace, req) {
            Ok(r) if r.is_nan() => Err("robustness is NaN".to_string()),
            Ok(r) => Ok((trace, r)),
            Err(e) => Err(e.to_string()),
        });
    let (trace, robustness, error) = match scored {
        Ok((trace, r)) => (Some(trace), r, None),
        Err(e) => (None, f64::INFINITY, Some(e)),
    };
    let mut trace_ref = None;
    if let (Some(dir), Some(trace)) = (&options.trace_dir, &trace) {
        let name = format!("eval-{index:04}.json");
        let path = dir.join(&name);
        let text = serde_json::to_string(trace).expect("trace is serializable");
        std::fs::write(&path, text).map_err(|source| FalsifyError::TraceOutput { path, source })?;
        trace_ref = Some(name);
    }
    Ok(Evaluation {
        sample: sample.clone(),
        robustness,
        trace_ref,
        error,
    })
}

/// A fidelity knob. Larger values mean more cost unless `inverse`, where the
/// cost is `1 / value` (a step size).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FidelityVar {
    pub name: String,
    pub inverse: bool,
}

impl FidelityVar {
    pub fn direct(name: &str) -> Self {
        FidelityVar {
            name: name.to_string(),
            inverse: false,
        }
    }

    pub fn inverse(name: &str) -> Self {
        FidelityVar {
            name: name.to_string(),
            inverse: true,
        }
    }

    pub fn cost(&self, value: f64) -> f64 {
        if self.inverse {
            1.0 / value
        } else {
            value
        }
    }
}

/// `iters` or `1/step_size`.
impl FromStr for FidelityVar {
    type Err = FalsifyError;

    fn from_str(s: &str) -> Result<Self, FalsifyError> {
        let s = s.trim();
        let var = match s.strip_prefix("1/") {
            Some(rest) => FidelityVar::inverse(rest.trim()),
            None => FidelityVar::direct(s),
        };
        if var.name.is_empty() {
            return Err(FalsifyError::UnknownVariable(s.to_string()));
        }
        Ok(var)
    }
}

impl fmt::Display for FidelityVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.inverse {
            write!(f, "1/{}", self.name)
        } else {
            f.write_str(&self.name)
        }
    }
}

impl Serialize for FidelityVar {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FidelityVar {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Among falsifying evaluations, the one with the least total cost (product
/// of per-variable costs), ties broken by the per-variable costs in order,
/// then by evaluation order.
pub fn lowest_fidelity_falsifier(
    result: &TestResult,
    fidelity_vars: &[FidelityVar],
) -> Result<Option<Sample>, FalsifyError> {
    for var in fidelity_vars {
        if result.space.bounds(&var.name).is_none() {
            return Err(FalsifyError::UnknownVariable(var.name.clone()));
        }
    }
    let key = |e: &Evaluation| -> (f64, Vec<f64>) {
        let costs: Vec<f64> = fidelity_vars
            .iter()
            .map(|v| v.cost(e.sample.get(&v.name).unwrap_or(f64::NAN)))
            .collect();
        (costs.iter().product(), costs)
    };
    let cmp = |a: &(f64, Vec<f64>), b: &(f64, Vec<f64>)| -> Ordering {
        a.0.total_cmp(&b.0).then_with(|| {
            a.1.iter()
                .zip(&b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    };
    let mut best: Option<(&Evaluation, (f64, Vec<f64>))> = None;
    for e in result.evaluations.iter().filter(|e| e.robustness < 0.0) {
        let k = key(e);
        if best.as_ref().map_or(true, |(_, bk)| cmp(&k, bk).is_lt()) {
            best = Some((e, k));
        }
    }
    Ok(best.map(|(e, _)| e.sample.clone()))
}
