//! Container backend.
//!
//! Components run as containers on a private bridge network created per
//! simulation. The broker runs on the host, bound to the network gateway,
//! so containers reach it at `{broker}`. Firmware ports are published to
//! engine-chosen loopback ports that are read back from inspection.

pub mod engine;

use std::collections::BTreeMap;
use std::io::Read;
use std::net::{IpAddr, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;
use thiserror::Error;
use uuid::Uuid;

pub use engine::{Endpoint, Engine, EngineError, NetworkSpec, RunSpec, SIM_LABEL};

use crate::lifecycle::{
    Backend, CommunicationNode, Component, CoreError, EnvironmentGuard, ExecutionEnvironment,
    NetworkHandle, Node, NodeError, NodeState, PortAllocator,
};
use crate::process::template::{expand_all, variables, TemplateError};
use crate::transport::{request_reply, Broker, RemapTable, TransportError};

/// Image used for built-in kinds unless `$COSIM_COMPONENT_IMAGE` is set.
pub const DEFAULT_COMPONENT_IMAGE: &str = "cosim-component:latest";
pub const IMAGE_ENV: &str = "COSIM_COMPONENT_IMAGE";
/// Port built-in firmware kinds listen on inside their container.
pub const FIRMWARE_CONTAINER_PORT: u16 = 5556;
pub const COMPONENT_LABEL: &str = "cosim.component";

const DEFAULT_GRACE: Duration = Duration::from_secs(5);
const DEFAULT_SEND_TIMEOUT: Duration = Duration::from_secs(60);
const READY_TIMEOUT: Duration = Duration::from_secs(20);

pub fn component_image() -> String {
    std::env::var(IMAGE_ENV)
        .ok()
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| DEFAULT_COMPONENT_IMAGE.to_string())
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("empty image reference")]
    EmptyImage,
    #[error("container port must be in 1..=65535")]
    BadPort,
    #[error("command template does not reference {{{0}}}")]
    MissingPortVariable(String),
    #[error("not running on a container network")]
    WrongBackend,
    #[error("{label} did not become ready: {reason}")]
    NotReady { label: String, reason: String },
    #[error("attached component needs a host")]
    EmptyGroup,
}

/// One container: image plus an argv template.
///
/// `{broker}` is always available in the command. Remap entries are
/// appended as `--remap src=dst`.
#[derive(Debug, Clone)]
pub struct ContainerComponent {
    pub image: String,
    pub command: Vec<String>,
    pub env_vars: Vec<(String, String)>,
    pub remap: RemapTable,
    pub grace: Duration,
    label: Option<String>,
}

impl ContainerComponent {
    pub fn new<I, S>(image: &str, command: I) -> Result<Self, ContainerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if image.trim().is_empty() {
            return Err(ContainerError::EmptyImage);
        }
        let c = ContainerComponent {
            image: image.to_string(),
            command: command.into_iter().map(Into::into).collect(),
            env_vars: Vec::new(),
            remap: RemapTable::default(),
            grace: DEFAULT_GRACE,
            label: None,
        };
        c.template_variables()?;
        Ok(c)
    }

    /// A built-in kind in the component image.
    pub fn builtin(kind: &str, args: Vec<String>) -> Self {
        let mut command = vec!["cosim-component".to_string(), kind.to_string()];
        command.extend(args);
        ContainerComponent::new(&component_image(), command)
            .expect("valid")
            .with_label(kind)
    }

    pub fn with_remap(mut self, remap: RemapTable) -> Self {
        self.remap = remap;
        self
    }

    pub fn env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env_vars.push((key.into(), value.into()));
        self
    }

    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn display_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.image.clone())
    }

    pub fn template_variables(&self) -> Result<Vec<String>, TemplateError> {
        let mut names = Vec::new();
        for a in &self.command {
            for v in variables(a)? {
                if !names.contains(&v) {
                    names.push(v);
                }
            }
        }
        Ok(names)
    }

    pub fn argv(&self, vars: &BTreeMap<String, String>) -> Result<Vec<String>, TemplateError> {
        let mut argv = expand_all(&self.command, vars)?;
        argv.extend(self.remap.to_args().into_iter().flat_map(|r| ["--remap".to_string(), r]));
        Ok(argv)
    }

    fn launch(
        &self,
        env: &ExecutionEnvironment,
        network: NetworkSpec,
        ports: Vec<u16>,
        extra: &BTreeMap<String, String>,
    ) -> Result<ContainerNode, ContainerError> {
        let (engine, network_id) = engine_of(env)?;
        let mut vars = BTreeMap::from([("broker".to_string(), env.broker_address.to_string())]);
        vars.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        let spec = RunSpec {
            image: self.image.clone(),
            argv: self.argv(&vars)?,
            network: match network {
                NetworkSpec::Attach(_) => NetworkSpec::Attach(network_id),
                other => other,
            },
            ports,
            env: self.env_vars.clone(),
            labels: BTreeMap::from([
                (SIM_LABEL.to_string(), env.simulation_id.to_string()),
                (COMPONENT_LABEL.to_string(), self.display_label()),
            ]),
        };
        let id = engine.run_container(&spec)?;
        Ok(ContainerNode::new(engine, id, self.display_label(), self.grace))
    }
}

fn engine_of(env: &ExecutionEnvironment) -> Result<(Engine, String), ContainerError> {
    match &env.network {
        NetworkHandle::Container { network_id, engine, .. } => {
            Ok((Engine::new(Endpoint::parse(engine)?), network_id.clone()))
        }
        NetworkHandle::Loopback => Err(ContainerError::WrongBackend),
    }
}

impl Component for ContainerComponent {
    type Node = ContainerNode;
    type Error = ContainerError;

    fn start(&self, env: &ExecutionEnvironment) -> Result<ContainerNode, ContainerError> {
        self.launch(env, NetworkSpec::Attach(String::new()), Vec::new(), &BTreeMap::new())
    }

    fn label(&self) -> String {
        self.display_label()
    }
}

/// A running container owned by a simulation.
#[derive(Debug)]
pub struct ContainerNode {
    engine: Engine,
    id: String,
    label: String,
    grace: Duration,
    stop_requested: AtomicBool,
    /// Terminal state once known.
    terminal: Mutex<Option<NodeState>>,
}

impl ContainerNode {
    fn new(engine: Engine, id: String, label: String, grace: Duration) -> Self {
        ContainerNode {
            engine,
            id,
            label,
            grace,
            stop_requested: AtomicBool::new(false),
            terminal: Mutex::new(None),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    fn observe(&self) -> NodeState {
        let info = match self.engine.inspect_container(&self.id) {
            Ok(info) => info,
            Err(e) if e.is_not_found() => return NodeState::Failed("container vanished".into()),
            Err(e) => return NodeState::Failed(e.to_string()),
        };
        let st = &info["State"];
        if st["Running"].as_bool().unwrap_or(false) {
            return NodeState::Running;
        }
        match st["Status"].as_str() {
            Some("created") | Some("restarting") => NodeState::Starting,
            _ => match st["ExitCode"].as_i64() {
                Some(0) => NodeState::Stopped,
                code => {
                    let mut reason = match code {
                        Some(c) => format!("exited with status {c}"),
                        None => "exited".to_string(),
                    };
                    if let Some(line) = self.engine.last_log_line(&self.id) {
                        reason.push_str(": ");
                        reason.push_str(&line);
                    }
                    NodeState::Failed(reason)
                }
            },
        }
    }

    fn stop_requested(&self) -> bool {
        self.stop_requested.load(Ordering::SeqCst)
    }
}

impl Node for ContainerNode {
    fn stop(&self) -> Result<(), NodeError> {
        let mut terminal = self.terminal.lock().unwrap();
        if terminal.is_some() {
            return Ok(());
        }
        let before = self.observe();
        self.stop_requested.store(true, Ordering::SeqCst);
        let grace = self.grace.as_secs_f64().ceil() as u64;
        let result = self.engine.stop_remove(&self.id, grace);
        *terminal = Some(match (&before, &result) {
            (NodeState::Failed(_), _) => before,
            (_, Err(e)) => NodeState::Failed(e.to_string()),
            _ => NodeState::Stopped,
        });
        result.map_err(|e| NodeError::Other(e.to_string()))
    }

    fn state(&self) -> NodeState {
        if let Some(s) = self.terminal.lock().unwrap().clone() {
            return s;
        }
        self.observe()
    }
}

impl Drop for ContainerNode {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// A container serving request/reply on `container_port`, published to a
/// random loopback port.
#[derive(Debug, Clone)]
pub struct FirmwareComponent {
    pub inner: ContainerComponent,
    pub container_port: u16,
    pub send_timeout: Duration,
    pub ready_timeout: Duration,
}

impl FirmwareComponent {
    /// `{port}` in the command expands to `container_port`, if used.
    pub fn new(inner: ContainerComponent, container_port: u16) -> Result<Self, ContainerError> {
        if container_port == 0 {
            return Err(ContainerError::BadPort);
        }
        Ok(FirmwareComponent {
            inner,
            container_port,
            send_timeout: DEFAULT_SEND_TIMEOUT,
            ready_timeout: READY_TIMEOUT,
        })
    }

    /// A built-in firmware kind listening on [`FIRMWARE_CONTAINER_PORT`].
    pub fn builtin(kind: &str, args: Vec<String>) -> Self {
        let mut args = args;
        args.extend(["--bind".to_string(), "0.0.0.0".to_string()]);
        FirmwareComponent::new(ContainerComponent::builtin(kind, args), FIRMWARE_CONTAINER_PORT).expect("valid")
    }

    pub fn with_send_timeout(mut self, timeout: Duration) -> Self {
        self.send_timeout = timeout;
        self
    }
}

/// A published port accepts immediately through the engine's proxy even
/// when nothing listens behind it; the proxy then hangs up. A connection
/// that stays open means the server is really there.
fn serving(addr: SocketAddr) -> bool {
    let Ok(mut s) = TcpStream::connect_timeout(&addr, Duration::from_millis(200)) else {
        return false;
    };
    let _ = s.set_read_timeout(Some(Duration::from_millis(150)));
    let mut buf = [0u8; 1];
    match s.read(&mut buf) {
        Ok(_) => false,
        Err(e) => matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut),
    }
}

impl Component for FirmwareComponent {
    type Node = FirmwareContainerNode;
    type Error = ContainerError;

    fn start(&self, env: &ExecutionEnvironment) -> Result<FirmwareContainerNode, ContainerError> {
        let extra = BTreeMap::from([("port".to_string(), self.container_port.to_string())]);
        let node = self.inner.launch(
            env,
            NetworkSpec::Attach(String::new()),
            vec![self.container_port],
            &extra,
        )?;
        let not_ready = |reason: String| ContainerError::NotReady {
            label: node.label.clone(),
            reason,
        };
        let host_port = node
            .engine
            .resolve_host_port(&node.id, self.container_port)
            .map_err(|e| not_ready(e.to_string()))?;
        let addr = SocketAddr::from(([127, 0, 0, 1], host_port));
        let deadline = Instant::now() + self.ready_timeout;
        let mut polls = 0u32;
        while !serving(addr) {
            polls += 1;
            if polls % 10 == 0 {
                if let s @ (NodeState::Failed(_) | NodeState::Stopped) = node.observe() {
                    return Err(not_ready(format!("{s:?}")));
                }
            }
            if Instant::now() > deadline {
                return Err(not_ready(format!("not serving on {addr} after {:?}", self.ready_timeout)));
            }
            thread::sleep(Duration::from_millis(20));
        }
        Ok(FirmwareContainerNode {
            container: node,
            address: addr,
            timeout: self.send_timeout,
            channel: Mutex::new(()),
        })
    }

    fn label(&self) -> String {
        self.inner.display_label()
    }
}

#[derive(Debug)]
pub struct FirmwareContainerNode {
    container: ContainerNode,
    address: SocketAddr,
    timeout: Duration,
    channel: Mutex<()>,
}

impl FirmwareContainerNode {
    pub fn address(&self) -> SocketAddr {
        self.address
    }

    pub fn container(&self) -> &ContainerNode {
        &self.container
    }
}

impl Node for FirmwareContainerNode {
    fn stop(&self) -> Result<(), NodeError> {
        self.container.stop()
    }

    fn state(&self) -> NodeState {
        self.container.state()
    }
}

impl CommunicationNode for FirmwareContainerNode {
    fn send(&self, message: &Value) -> Result<Value, NodeError> {
        let _serial = self.channel.lock().unwrap();
        if self.container.stop_requested() {
            return Err(NodeError::ChannelClosed);
        }
        match request_reply(self.address, message, self.timeout) {
            Ok(reply) => Ok(reply),
            Err(
                err @ (TransportError::ConnectionRefused(_)
                | TransportError::Eof
                | TransportError::Truncated
                | TransportError::Io(_)),
            ) => match self.container.state() {
                NodeState::Failed(reason) => Err(NodeError::NodeDead(reason)),
                NodeState::Stopped if !self.container.stop_requested() => {
                    Err(NodeError::NodeDead("exited".into()))
                }
                _ if self.container.stop_requested() => Err(NodeError::ChannelClosed),
                _ => Err(err.into()),
            },
            Err(err) => Err(err.into()),
        }
    }
}

/// A host container plus satellites that share its network stack.
#[derive(Debug, Clone)]
pub struct AttachedComponent {
    pub host: ContainerComponent,
    pub satellites: Vec<ContainerComponent>,
}

impl AttachedComponent {
    pub fn new(host: ContainerComponent, satellites: Vec<ContainerComponent>) -> Self {
        AttachedComponent { host, satellites }
    }
}

impl Component for AttachedComponent {
    type Node = AttachedNode;
    type Error = ContainerError;

    fn start(&self, env: &ExecutionEnvironment) -> Result<AttachedNode, ContainerError> {
        let host = self.host.start(env)?;
        let mut members = vec![host];
        for sat in &self.satellites {
            let stack = NetworkSpec::ShareStack(members[0].id.clone());
            match sat.launch(env, stack, Vec::new(), &BTreeMap::new()) {
                Ok(node) => members.push(node),
                Err(e) => {
                    for m in members.iter().rev() {
                        let _ = m.stop();
                    }
                    return Err(e);
                }
            }
        }
        Ok(AttachedNode { members })
    }

    fn label(&self) -> String {
        self.host.display_label()
    }
}

/// Index 0 is the host.
#[derive(Debug)]
pub struct AttachedNode {
    members: Vec<ContainerNode>,
}

impl AttachedNode {
    pub fn members(&self) -> &[ContainerNode] {
        &self.members
    }

    pub fn host(&self) -> &ContainerNode {
        &self.members[0]
    }
}

impl Node for AttachedNode {
    fn stop(&self) -> Result<(), NodeError> {
        let mut first_err = None;
        for m in self.members.iter().rev() {
            if let Err(e) = m.stop() {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    fn state(&self) -> NodeState {
        let states: Vec<NodeState> = self.members.iter().map(|m| m.state()).collect();
        if let Some(f) = states.iter().find(|s| matches!(s, NodeState::Failed(_))) {
            return f.clone();
        }
        if states.iter().all(|s| *s == NodeState::Stopped) {
            NodeState::Stopped
        } else if states.iter().all(|s| *s == NodeState::Running) {
            NodeState::Running
        } else {
            NodeState::Starting
        }
    }
}

/// Runs simulations as containers through the engine API.
#[derive(Debug, Clone)]
pub struct ContainerBackend {
    engine: Engine,
}

impl ContainerBackend {
    pub fn new(engine: Engine) -> Self {
        ContainerBackend { engine }
    }

    /// Engine from `$DOCKER_HOST` or the default socket.
    pub fn from_env() -> Result<Self, EngineError> {
        Ok(Self::new(Engine::from_env()?))
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }
}

struct ContainerGuard {
    engine: Engine,
    simulation_id: Uuid,
    network_id: Option<String>,
    broker: Option<Broker>,
    workdir: Option<TempDir>,
}

impl EnvironmentGuard for ContainerGuard {
    fn teardown(&mut self) -> Vec<String> {
        let mut leftovers = Vec::new();
        if let Some(mut broker) = self.broker.take() {
            broker.stop();
        }
        let sim = self.simulation_id.to_string();
        match self.engine.containers_with_label(SIM_LABEL, &sim) {
            Ok(ids) => {
                for id in ids {
                    match self.engine.stop_remove(&id, 0) {
                        Ok(()) => leftovers.push(format!("container {id} was still present; removed")),
                        Err(e) => leftovers.push(format!("container {id}: {e}")),
                    }
                }
            }
            Err(e) => leftovers.push(format!("listing containers: {e}")),
        }
        if let Some(net) = self.network_id.take() {
            if let Err(e) = self.engine.remove_network(&net) {
                leftovers.push(format!("network {net}: {e}"));
            }
        }
        if let Some(dir) = self.workdir.take() {
            let _ = dir.close();
        }
        leftovers
    }
}

impl Drop for ContainerGuard {
    fn drop(&mut self) {
        if self.network_id.is_some() || self.broker.is_some() {
            self.teardown();
        }
    }
}

impl Backend for ContainerBackend {
    fn setup(
        &self,
        simulation_id: Uuid,
    ) -> Result<(ExecutionEnvironment, Box<dyn EnvironmentGuard>), CoreError> {
        let env_err = |e: &dyn std::fmt::Display| CoreError::Environment(e.to_string());
        self.engine.ping().map_err(|e| env_err(&e))?;
        let labels = BTreeMap::from([(SIM_LABEL.to_string(), simulation_id.to_string())]);
        let (network_id, name) = self.engine.create_unique_network(&labels).map_err(|e| env_err(&e))?;
        // from here on the guard cleans up on any early return
        let mut guard = ContainerGuard {
            engine: self.engine.clone(),
            simulation_id,
            network_id: Some(network_id.clone()),
            broker: None,
            workdir: None,
        };
        let gateway: IpAddr = self
            .engine
            .network_gateway(&network_id)
            .map_err(|e| env_err(&e))?
            .parse()
            .map_err(|e| env_err(&format!("network gateway: {e}")))?;
        let broker = Broker::serve(SocketAddr::new(gateway, 0)).map_err(|e| env_err(&format!("broker: {e}")))?;
        let broker_address = broker.local_addr();
        guard.broker = Some(broker);
        let workdir = tempfile::Builder::new()
            .prefix("cosim-")
            .tempdir()
            .map_err(|e| env_err(&format!("workdir: {e}")))?;
        let env = ExecutionEnvironment {
            simulation_id,
            broker_address,
            ports: Arc::new(PortAllocator::loopback()),
            network: NetworkHandle::Container {
                network_id,
                name,
                engine: self.engine.endpoint().to_string(),
            },
            workdir: workdir.path().to_path_buf(),
        };
        guard.workdir = Some(workdir);
        Ok((env, Box::new(guard)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_validation() {
        assert!(matches!(ContainerComponent::new(" ", ["x"]), Err(ContainerError::EmptyImage)));
        assert!(ContainerComponent::new("img", ["{broken"]).is_err());
        let c = ContainerComponent::new("img", ["run", "--broker", "{broker}"]).unwrap();
        assert!(FirmwareComponent::new(c.clone(), 0).is_err());
        let argv = c
            .with_remap("gps=gps_raw".parse().unwrap())
            .argv(&BTreeMap::from([("broker".into(), "10.0.0.1:7000".into())]))
            .unwrap();
        assert_eq!(argv, ["run", "--broker", "10.0.0.1:7000", "--remap", "gps=gps_raw"]);
    }

    #[test]
    fn builtin_firmware_binds_all_interfaces() {
        let fw = FirmwareComponent::builtin("autopilot", vec!["--port".into(), "{port}".into()]);
        assert_eq!(fw.container_port, FIRMWARE_CONTAINER_PORT);
        let argv = fw
            .inner
            .argv(&BTreeMap::from([("port".to_string(), "5556".to_string())]))
            .unwrap();
        assert_eq!(argv[..2], ["cosim-component", "autopilot"]);
        assert!(argv.windows(2).any(|w| w == ["--bind", "0.0.0.0"]));
        assert!(argv.windows(2).any(|w| w == ["--port", "5556"]));
    }

    #[test]
    fn unreachable_engine_fails_setup_naming_endpoint() {
        let backend = ContainerBackend::new(Engine::new(Endpoint::Unix("/nonexistent/e.sock".into())));
        let err = backend.setup(Uuid::new_v4()).err().unwrap();
        assert!(err.to_string().contains("unix:///nonexistent/e.sock"), "{err}");
    }
}
