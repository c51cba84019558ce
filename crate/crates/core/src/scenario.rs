//! Declarative scenario and campaign files.
//!
//! A scenario lists components in start order, picks a backend and sends one
//! request to its single request/reply component; the reply is the trace.
//! A campaign wraps a scenario template whose `"{var}"` strings are filled
//! from falsification samples.

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::components::builtin::{builtin_args, kind_info, BuiltinComponent, KINDS};
use crate::container::{ContainerBackend, ContainerComponent, ContainerError, FirmwareComponent};
use crate::falsify::{FidelityVar, Requirement, Sample, SampleSpace, TestOptions};
use crate::lifecycle::{Backend, CommunicationNode, NodeId, NodeState, NodeStatus, Simulator};
use crate::process::ProcessBackend;
use crate::trace::Trace;
use crate::transport::RemapTable;

pub const SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Process,
    Container,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// A built-in kind (see `cosim list`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Or an image plus a command template (container backend only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub command: Vec<String>,
    /// Port an image component serves requests on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub config: Map<String, Value>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub remap: IndexMap<String, String>,
}

impl ComponentConfig {
    fn is_firmware(&self) -> bool {
        match &self.kind {
            Some(k) => kind_info(k).is_some_and(|i| i.firmware),
            None => self.request_port.is_some(),
        }
    }

    fn remap_table(&self) -> Result<RemapTable, String> {
        RemapTable::new(self.remap.iter().map(|(k, v)| (k.as_str(), v.as_str()))).map_err(|e| e.to_string())
    }

    fn default_name(&self) -> String {
        match (&self.kind, &self.image) {
            (Some(k), _) => k.clone(),
            (None, Some(img)) => {
                let last = img.rsplit('/').next().unwrap_or(img);
                last.split([':', '@']).next().unwrap_or(last).to_string()
            }
            (None, None) => "component".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: u32,
    #[serde(default)]
    pub backend: BackendKind,
    /// Simulated seconds; passed to the request as `duration` unless the
    /// request sets `duration` or `max_time` itself.
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    /// Signals kept in the exported trace; empty keeps all.
    #[serde(default)]
    pub outputs: Vec<String>,
    pub components: Vec<ComponentConfig>,
    #[serde(default)]
    pub request: Map<String, Value>,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?)
    }

    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        cfg.normalize();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario is representable")
    }

    /// Fills in component names (unique, defaulting to the kind).
    pub fn normalize(&mut self) {
        let mut seen: Vec<String> = Vec::new();
        for c in &mut self.components {
            let base = c.name.clone().unwrap_or_else(|| c.default_name());
            let mut name = base.clone();
            let mut n = 2;
            while seen.contains(&name) {
                name = format!("{base}-{n}");
                n += 1;
            }
            seen.push(name.clone());
            c.name = Some(name);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != SCHEMA {
            return Err(invalid("schema", format!("unsupported schema {}, expected {SCHEMA}", self.schema)));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(invalid("duration", "must be a positive number of seconds"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", format!("must be at most {}", i64::MAX)));
        }
        if self.components.is_empty() {
            return Err(invalid("components", "at least one component is required"));
        }
        for (i, c) in self.components.iter().enumerate() {
            let field = |f: &str| format!("components[{i}].{f}");
            match (&c.kind, &c.image) {
                (Some(_), Some(_)) => return Err(invalid(field("kind"), "set either kind or image, not both")),
                (None, None) => return Err(invalid(field("kind"), "set kind or image")),
                (Some(kind), None) => {
                    if kind_info(kind).is_none() {
                        let known: Vec<&str> = KINDS.iter().map(|k| k.name).collect();
                        return Err(invalid(
                            field("kind"),
                            format!("unknown component kind {kind:?} (known: {})", known.join(", ")),
                        ));
                    }
                    if !c.command.is_empty() || c.request_port.is_some() {
                        return Err(invalid(field("command"), "command/request_port only apply to image components"));
                    }
                    builtin_args(kind, &c.config, self.seed).map_err(|e| invalid(field("config"), e))?;
                }
                (None, Some(image)) => {
                    if self.backend != BackendKind::Container {
                        return Err(invalid(field("image"), "image components need backend = \"container\""));
                    }
                    if !c.config.is_empty() {
                        return Err(invalid(field("config"), "config only applies to built-in kinds"));
                    }
                    ContainerComponent::new(image, c.command.clone()).map_err(|e| match e {
                        ContainerError::EmptyImage => invalid(field("image"), e),
                        other => invalid(field("command"), other),
                    })?;
                    if c.request_port == Some(0) {
                        return Err(invalid(field("request_port"), "must be in 1..=65535"));
                    }
                }
            }
            c.remap_table().map_err(|e| invalid(field("remap"), e))?;
        }
        let firmware = self.components.iter().filter(|c| c.is_firmware()).count();
        if firmware != 1 {
            return Err(invalid(
                "components",
                format!("exactly one request/reply component is required, found {firmware}"),
            ));
        }
        if let Some(signals) = self.reply_signals() {
            for (i, out) in self.outputs.iter().enumerate() {
                if !signals.iter().any(|s| s == out) {
                    return Err(invalid(
                        format!("outputs[{i}]"),
                        format!("{out:?} is not produced (available: {})", signals.join(", ")),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Signals the reply trace will carry, when statically known.
    pub fn reply_signals(&self) -> Option<Vec<String>> {
        let fw = self.components.iter().find(|c| c.is_firmware())?;
        let info = kind_info(fw.kind.as_deref()?)?;
        Some(info.signals.iter().map(|s| s.to_string()).collect())
    }

    /// The request document, with `duration` filled in.
    pub fn request_document(&self) -> Value {
        let mut req = self.request.clone();
        if !req.contains_key("duration") && !req.contains_key("max_time") {
            req.insert("duration".into(), Value::from(self.duration));
        }
        Value::Object(req)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A failed run, with the node states at the time.
#[derive(Debug)]
pub struct RunError {
    pub message: String,
    pub nodes: Vec<NodeStatus>,
}

impl RunError {
    fn new(message: impl Into<String>) -> Self {
        RunError {
            message: message.into(),
            nodes: Vec::new(),
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)?;
        for n in &self.nodes {
            let state = serde_json::to_value(&n.state).unwrap_or_default();
            write!(f, "\n  {}: {}", n.label, state.as_str().unwrap_or("?"))?;
        }
        Ok(())
    }
}

impl std::error::Error for RunError {}

/// Builds the simulator for `cfg`, sends its request and returns the trace.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Trace, RunError> {
    cfg.validate().map_err(|e| RunError::new(e.to_string()))?;
    let mut cfg = cfg.clone();
    cfg.normalize();
    match cfg.backend {
        BackendKind::Process => run_process(&cfg),
        BackendKind::Container => run_container(&cfg),
    }
}

fn build_err(i: usize, e: impl fmt::Display) -> RunError {
    RunError::new(format!("components[{i}]: {e}"))
}

fn run_process(cfg: &ScenarioConfig) -> Result<Trace, RunError> {
    let mut sim = Simulator::new(ProcessBackend::new());
    let mut fw = None;
    for (i, c) in cfg.components.iter().enumerate() {
        let kind = c.kind.as_deref().expect("validated");
        let remap = c.remap_table().map_err(|e| build_err(i, e))?;
        let name = c.name.clone().expect("normalized");
        let add = match BuiltinComponent::new(kind, &c.config, remap, cfg.seed).map_err(|e| build_err(i, e))? {
            BuiltinComponent::Process(p) => sim.add(p.with_label(name)).map(|_| ()),
            BuiltinComponent::Firmware(mut f) => {
                f.inner = f.inner.with_label(name);
                sim.add(f).map(|id| fw = Some(id))
            }
        };
        add.map_err(|e| build_err(i, e))?;
    }
    drive(sim, fw.expect("validated"), cfg)
}

fn run_container(cfg: &ScenarioConfig) -> Result<Trace, RunError> {
    let backend = ContainerBackend::from_env().map_err(|e| RunError::new(e.to_string()))?;
    let mut sim = Simulator::new(backend);
    let mut fw = None;
    for (i, c) in cfg.components.iter().enumerate() {
        let remap = c.remap_table().map_err(|e| build_err(i, e))?;
        let name = c.name.clone().expect("normalized");
        let added = match (&c.kind, &c.image) {
            (Some(kind), _) => {
                let args = builtin_args(kind, &c.config, cfg.seed).map_err(|e| build_err(i, e))?;
                if c.is_firmware() {
                    let mut f = FirmwareComponent::builtin(kind, args);
                    f.inner = f.inner.with_remap(remap).with_label(name);
                    sim.add(f).map(|id| fw = Some(id))
                } else {
                    let comp = ContainerComponent::builtin(kind, args).with_remap(remap).with_label(name);
                    sim.add(comp).map(|_| ())
                }
            }
            (None, Some(image)) => {
                let comp = ContainerComponent::new(image, c.command.clone())
                    .map_err(|e| build_err(i, e))?
                    .with_remap(remap)
                    .with_label(name);
                match c.request_port {
                    Some(port) => {
                        let f = FirmwareComponent::new(comp, port).map_err(|e| build_err(i, e))?;
                        sim.add(f).map(|id| fw = Some(id))
                    }
                    None => sim.add(comp).map(|_| ()),
                }
            }
            (None, None) => unreachable!("validated"),
        };
        added.map_err(|e| build_err(i, e))?;
    }
    drive(sim, fw.expect("validated"), cfg)
}

fn drive<B: Backend, N: CommunicationNode>(
    mut sim: Simulator<B>,
    fw: NodeId<N>,
    cfg: &ScenarioConfig,
) -> Result<Trace, RunError> {
    let running = sim.start().map_err(|e| RunError::new(e.to_string()))?;
    let reply = running
        .get(&fw)
        .map_err(|e| e.to_string())
        .and_then(|node| node.send(&cfg.request_document()).map_err(|e| e.to_string()));
    let status = running.stop();
    let fail = |message: String| RunError {
        message,
        nodes: status.nodes.clone(),
    };
    let reply = reply.map_err(|e| fail(format!("request failed: {e}")))?;
    if let Some(err) = reply.get("error") {
        return Err(fail(format!("component replied with an error: {err}")));
    }
    if status.nodes.iter().any(|n| matches!(n.state, NodeState::Failed(_))) {
        return Err(fail("a component failed during the run".into()));
    }
    let trace: Trace = serde_json::from_value(reply).map_err(|e| fail(format!("reply is not a trace: {e}")))?;
    if cfg.outputs.is_empty() {
        Ok(trace)
    } else {
        trace.select(&cfg.outputs).map_err(|e| fail(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSection {
    pub requirement: Requirement,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub parallelism: usize,
    /// Fidelity knobs in priority order; `1/name` marks a step size.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fidelity: Vec<FidelityVar>,
}

fn one() -> usize {
    1
}

/// A falsification campaign: scenario template, sample space and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub schema: u32,
    /// Scenario whose `"{var}"` strings are replaced by sample values.
    pub scenario: Value,
    /// name = [low, high]
    pub space: IndexMap<String, (f64, f64)>,
    /// Variables rounded to integers after sampling.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub integer: Vec<String>,
    pub test: TestSection,
}

impl CampaignConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: CampaignConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("campaign is representable")
    }

    pub fn sample_space(&self) -> Result<SampleSpace, ConfigError> {
        let mut space = SampleSpace::new();
        for name in &self.integer {
            if !self.space.contains_key(name) {
                return Err(invalid("integer", format!("{name:?} is not in space")));
            }
        }
        for (name, &(lo, hi)) in &self.space {
            let field = format!("space.{name}");
            space = if self.integer.contains(name) {
                space.with_integer(name, lo, hi)
            } else {
                space.with_var(name, lo, hi)
            }
            .map_err(|e| invalid(field, e))?;
        }
        Ok(space)
    }

    pub fn options(&self) -> TestOptions {
        TestOptions::new(self.test.iterations, self.test.seed).with_parallelism(self.test.parallelism)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != SCHEMA {
            return Err(invalid("schema", format!("unsupported schema {}, expected {SCHEMA}", self.schema)));
        }
        let space = self.sample_space()?;
        if self.test.iterations == 0 {
            return Err(invalid("test.iterations", "must be >= 1"));
        }
        if self.test.parallelism == 0 {
            return Err(invalid("test.parallelism", "must be >= 1"));
        }
        for (i, f) in self.test.fidelity.iter().enumerate() {
            if space.bounds(&f.name).is_none() {
                return Err(invalid(format!("test.fidelity[{i}]"), format!("{:?} is not in space", f.name)));
            }
        }
        check_placeholders(&self.scenario, "scenario", &self.space)?;
        // a mid-range sample must give a valid scenario
        let mid = Sample {
            values: space
                .variables()
                .map(|(n, (lo, hi))| {
                    let m = lo + (hi - lo) / 2.0;
                    (n.to_string(), if space.is_integer(n) { m.round() } else { m })
                })
                .collect(),
        };
        let scenario = self.instantiate(&mid).map_err(|e| match e {
            ConfigError::Invalid { field, message } => invalid(format!("scenario.{field}"), message),
            other => other,
        })?;
        if let Some(signals) = scenario.reply_signals() {
            let wanted = self.test.requirement.signal();
            let visible = if scenario.outputs.is_empty() {
                signals.iter().any(|s| s == wanted)
            } else {
                scenario.outputs.iter().any(|s| s == wanted)
            };
            if !visible {
                return Err(invalid(
                    "test.requirement",
                    format!("signal {wanted:?} is not in the scenario's trace"),
                ));
            }
        }
        Ok(())
    }

    /// The scenario for one sample.
    pub fn instantiate(&self, sample: &Sample) -> Result<ScenarioConfig, ConfigError> {
        let filled = substitute(&self.scenario, sample, &self.integer);
        let cfg: ScenarioConfig = serde_json::from_value(filled).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn placeholder(s: &str) -> Option<&str> {
    s.strip_prefix('{')?.strip_suffix('}')
}

fn check_placeholders(v: &Value, path: &str, space: &IndexMap<String, (f64, f64)>) -> Result<(), ConfigError> {
    match v {
        Value::String(s) => {
            if placeholder(s).is_some_and(|n| space.contains_key(n)) {
                return Ok(());
            }
            for name in space.keys() {
                if s.contains(&format!("{{{name}}}")) {
                    return Err(invalid(path, format!("placeholder {{{name}}} must be the whole string")));
                }
            }
            Ok(())
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                check_placeholders(item, &format!("{path}[{i}]"), space)?;
            }
            Ok(())
        }
        Value::Object(map) => {
            for (k, item) in map {
                check_placeholders(item, &format!("{path}.{k}"), space)?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn substitute(v: &Value, sample: &Sample, integer: &[String]) -> Value {
    match v {
        Value::String(s) => match placeholder(s).and_then(|n| Some((n, sample.get(n)?))) {
            Some((name, x)) if integer.iter().any(|i| i == name) => Value::from(x as i64),
            Some((_, x)) => Value::from(x),
            None => v.clone(),
        },
        Value::Array(items) => Value::Array(items.iter().map(|i| substitute(i, sample, integer)).collect()),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, i)| (k.clone(), substitute(i, sample, integer)))
                .collect(),
        ),
        other => other.clone(),
    }
}
