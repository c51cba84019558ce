use std::collections::BTreeMap;
use std::env;
use std::io;
use std::net::{SocketAddr, TcpStream};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use super::node::{FirmwareNode, GroupNode, ProcessNode, DEFAULT_GRACE, DEFAULT_SEND_TIMEOUT};
use super::template::{expand_all, variables, TemplateError};
use super::ProcessError;
use crate::lifecycle::{Component, ExecutionEnvironment, Node};
use crate::transport::RemapTable;

/// Environment variable naming the component runner binary.
pub const RUNNER_ENV: &str = "COSIM_COMPONENT_EXE";
const RUNNER_NAME: &str = "cosim-component";
const READY_TIMEOUT: Duration = Duration::from_secs(10);

static RUNNER: OnceLock<(PathBuf, Vec<String>)> = OnceLock::new();

/// Registers the program (plus leading arguments) that runs built-in
/// component kinds. Only the first call has an effect.
pub fn set_component_runner(program: PathBuf, prefix: Vec<String>) {
    let _ = RUNNER.set((program, prefix));
}

/// Resolves the built-in component runner: an explicit registration, then
/// `$COSIM_COMPONENT_EXE`, then a `cosim-component` binary next to the
/// current executable or one directory up.
pub fn component_runner() -> io::Result<(PathBuf, Vec<String>)> {
    if let Some(r) = RUNNER.get() {
        return Ok(r.clone());
    }
    if let Some(path) = env::var_os(RUNNER_ENV) {
        return Ok((PathBuf::from(path), Vec::new()));
    }
    let exe = env::current_exe()?;
    let mut dir = exe.parent();
    for _ in 0..2 {
        let Some(d) = dir else { break };
        let candidate = d.join(RUNNER_NAME);
        if candidate.is_file() {
            return Ok((candidate, Vec::new()));
        }
        dir = d.parent();
    }
    Err(io::Error::new(
        io::ErrorKind::NotFound,
        format!("{RUNNER_NAME} not found next to {}; set {RUNNER_ENV}", exe.display()),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Executable {
    /// A kind understood by the component runner, e.g. `rover-plant`.
    Builtin(String),
    Path(PathBuf),
}

/// A component run as a local child process.
///
/// `args` are templates; `{broker}` and `{workdir}` are always available.
/// Remap entries are appended as `--remap src=dst`.
#[derive(Debug, Clone)]
pub struct ProcessComponent {
    pub executable: Executable,
    pub args: Vec<String>,
    pub remap: RemapTable,
    pub env_vars: Vec<(String, String)>,
    pub grace: Duration,
    pub label: Option<String>,
}

impl ProcessComponent {
    pub fn new(executable: Executable) -> Self {
        ProcessComponent {
            executable,
            args: Vec::new(),
            remap: RemapTable::default(),
            env_vars: Vec::new(),
            grace: DEFAULT_GRACE,
            label: None,
        }
    }

    pub fn builtin(kind: &str) -> Self {
        Self::new(Executable::Builtin(kind.to_string()))
    }

    pub fn path(path: impl Into<PathBuf>) -> Self {
        Self::new(Executable::Path(path.into()))
    }

    /// Splits a whitespace-separated command line; the first word is the
    /// executable.
    pub fn from_command(command: &str) -> Self {
        let mut words = command.split_whitespace().map(String::from);
        let exe = words.next().unwrap_or_default();
        Self::path(exe).args(words)
    }

    pub fn arg(mut self, arg: impl Into<String>) -> Self {
        self.args.push(arg.into());
        self
    }

    pub fn args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.args.extend(args.into_iter().map(Into::into));
        self
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
        if let Some(l) = &self.label {
            return l.clone();
        }
        match &self.executable {
            Executable::Builtin(kind) => kind.clone(),
            Executable::Path(p) => p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string()),
        }
    }

    /// Every `{name}` referenced by the arguments.
    pub fn template_variables(&self) -> Result<Vec<String>, TemplateError> {
        let mut names = Vec::new();
        for a in &self.args {
            for v in variables(a)? {
                if !names.contains(&v) {
                    names.push(v);
                }
            }
        }
        Ok(names)
    }

    /// Program and argv after substitution.
    pub fn command_line(&self, vars: &BTreeMap<String, String>) -> Result<(PathBuf, Vec<String>), ProcessError> {
        let mut argv = Vec::new();
        let program = match &self.executable {
            Executable::Builtin(kind) => {
                let (program, prefix) = component_runner().map_err(|source| ProcessError::Spawn {
                    program: RUNNER_NAME.into(),
                    source,
                })?;
                argv.extend(prefix);
                argv.push(kind.clone());
                program
            }
            Executable::Path(p) => p.clone(),
        };
        argv.extend(expand_all(&self.args, vars)?);
        argv.extend(self.remap.to_args().into_iter().flat_map(|r| ["--remap".to_string(), r]));
        Ok((program, argv))
    }

    fn spawn(&self, env: &ExecutionEnvironment, extra: &BTreeMap<String, String>) -> Result<ProcessNode, ProcessError> {
        let mut vars = base_vars(env);
        vars.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        let (program, argv) = self.command_line(&vars)?;
        ProcessNode::spawn(
            &self.display_label(),
            &program,
            &argv,
            &self.env_vars,
            &env.workdir,
            self.grace,
        )
    }
}

fn base_vars(env: &ExecutionEnvironment) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("broker".to_string(), env.broker_address.to_string()),
        ("workdir".to_string(), env.workdir.display().to_string()),
    ])
}

impl Component for ProcessComponent {
    type Node = ProcessNode;
    type Error = ProcessError;

    fn start(&self, env: &ExecutionEnvironment) -> Result<ProcessNode, ProcessError> {
        self.spawn(env, &BTreeMap::new())
    }

    fn label(&self) -> String {
        self.display_label()
    }
}

/// A process component that serves request/reply on an allocated loopback
/// port, passed to it through the `request_port_var` template variable.
#[derive(Debug, Clone)]
pub struct FirmwareProcessComponent {
    pub inner: ProcessComponent,
    pub request_port_var: String,
    pub send_timeout: Duration,
    pub ready_timeout: Duration,
}

impl FirmwareProcessComponent {
    pub fn new(inner: ProcessComponent) -> Result<Self, ProcessError> {
        Self::with_port_var(inner, "port")
    }

    pub fn with_port_var(inner: ProcessComponent, var: &str) -> Result<Self, ProcessError> {
        if !inner.template_variables()?.iter().any(|v| v == var) {
            return Err(ProcessError::MissingPortVariable(var.to_string()));
        }
        Ok(FirmwareProcessComponent {
            inner,
            request_port_var: var.to_string(),
            send_timeout: DEFAULT_SEND_TIMEOUT,
            ready_timeout: READY_TIMEOUT,
        })
    }

    pub fn with_send_timeout(mut self, timeout: Duration) -> Self {
        self.send_timeout = timeout;
        self
    }
}

/// Polls until something accepts on `addr`. Fails early if the process dies.
fn wait_listening(node: &ProcessNode, addr: SocketAddr, timeout: Duration) -> Result<(), String> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(status) = node.exit_status() {
            return Err(format!("exited before listening ({status})"));
        }
        if TcpStream::connect_timeout(&addr, Duration::from_millis(100)).is_ok() {
            return Ok(());
        }
        if Instant::now() > deadline {
            return Err(format!("not listening on {addr} after {timeout:?}"));
        }
        thread::sleep(Duration::from_millis(10));
    }
}

impl Component for FirmwareProcessComponent {
    type Node = FirmwareNode;
    type Error = ProcessError;

    fn start(&self, env: &ExecutionEnvironment) -> Result<FirmwareNode, ProcessError> {
        let port = env.ports.allocate().map_err(ProcessError::Port)?;
        let extra = BTreeMap::from([(self.request_port_var.clone(), port.to_string())]);
        let node = self.inner.spawn(env, &extra)?;
        let addr = SocketAddr::new(env.ports.bind_ip(), port);
        if let Err(reason) = wait_listening(&node, addr, self.ready_timeout) {
            let state = node.state();
            let _ = node.stop();
            return Err(ProcessError::NotReady {
                label: node.label().to_string(),
                reason: format!("{reason}; {state:?}"),
            });
        }
        Ok(FirmwareNode::new(node, addr, self.send_timeout))
    }

    fn label(&self) -> String {
        self.inner.display_label()
    }
}

/// Processes sharing one port namespace: `{p0}`, `{p1}`, ... are allocated
/// once per group and substituted identically into every member. Member 0
/// is the host; its ports are the group's visible ports.
#[derive(Debug, Clone)]
pub struct AttachedProcessGroup {
    pub members: Vec<ProcessComponent>,
}

impl AttachedProcessGroup {
    pub fn new(members: Vec<ProcessComponent>) -> Result<Self, ProcessError> {
        if members.is_empty() {
            return Err(ProcessError::EmptyGroup);
        }
        Ok(AttachedProcessGroup { members })
    }

    /// Number of `{pN}` ports the members reference.
    pub fn port_count(&self) -> Result<usize, ProcessError> {
        let mut count = 0;
        for m in &self.members {
            for v in m.template_variables()? {
                if let Some(idx) = v.strip_prefix('p').and_then(|n| n.parse::<usize>().ok()) {
                    count = count.max(idx + 1);
                }
            }
        }
        Ok(count)
    }
}

impl Component for AttachedProcessGroup {
    type Node = GroupNode;
    type Error = ProcessError;

    fn start(&self, env: &ExecutionEnvironment) -> Result<GroupNode, ProcessError> {
        let mut ports = Vec::new();
        let mut vars = BTreeMap::new();
        for i in 0..self.port_count()? {
            let port = env.ports.allocate().map_err(ProcessError::Port)?;
            vars.insert(format!("p{i}"), port.to_string());
            ports.push(port);
        }
        let mut started: Vec<ProcessNode> = Vec::with_capacity(self.members.len());
        for member in &self.members {
            match member.spawn(env, &vars) {
                Ok(node) => started.push(node),
                Err(e) => {
                    for node in started.iter().rev() {
                        let _ = node.stop();
                    }
                    return Err(e);
                }
            }
        }
        Ok(GroupNode::new(started, ports))
    }

    fn label(&self) -> String {
        format!("group({})", self.members[0].display_label())
    }
}
