use std::fs::{self, File};
use std::io;
use std::net::SocketAddr;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde_json::Value;

use super::procfs;
use super::ProcessError;
use crate::lifecycle::{CommunicationNode, Node, NodeError, NodeState};
use crate::transport::{request_reply, TransportError};

pub const DEFAULT_GRACE: Duration = Duration::from_secs(5);
pub const DEFAULT_SEND_TIMEOUT: Duration = Duration::from_secs(60);
const KILL_WAIT: Duration = Duration::from_secs(1);

#[derive(Debug, Default)]
struct ExitInfo {
    status: Option<ExitStatus>,
    /// True if the process ended before anyone asked it to.
    unsolicited: bool,
    stop_requested: bool,
}

#[derive(Debug, Default)]
struct Shared {
    exit: Mutex<ExitInfo>,
    exited: Condvar,
}

fn describe(status: ExitStatus) -> String {
    match (status.code(), status.signal()) {
        (Some(code), _) => format!("exited with status {code}"),
        (None, Some(sig)) => format!("killed by signal {sig}"),
        _ => status.to_string(),
    }
}

fn last_line(path: &Path) -> Option<String> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_string())
}

fn signal_group(pgid: u32, signal: libc::c_int) {
    // ESRCH just means the group is already gone
    unsafe {
        libc::kill(-(pgid as libc::pid_t), signal);
    }
}

/// A supervised child process running in its own process group.
///
/// Stopping sends SIGTERM to the whole group, waits for the grace period,
/// then SIGKILLs whatever is left.
#[derive(Debug)]
pub struct ProcessNode {
    label: String,
    pid: u32,
    grace: Duration,
    log_path: PathBuf,
    shared: Arc<Shared>,
    stop_result: Mutex<Option<Result<(), NodeError>>>,
}

impl ProcessNode {
    pub(crate) fn spawn(
        label: &str,
        program: &Path,
        argv: &[String],
        env_vars: &[(String, String)],
        workdir: &Path,
        grace: Duration,
    ) -> Result<Self, ProcessError> {
        let log_path = unique_log_path(workdir, label);
        let log = File::create(&log_path).map_err(|source| ProcessError::Spawn {
            program: program.display().to_string(),
            source,
        })?;
        let log_err = log.try_clone().map_err(|source| ProcessError::Spawn {
            program: program.display().to_string(),
            source,
        })?;

        let mut cmd = Command::new(program);
        cmd.args(argv)
            .envs(env_vars.iter().map(|(k, v)| (k, v)))
            .current_dir(workdir)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log_err)
            .process_group(0);
        let mut child = cmd.spawn().map_err(|source| ProcessError::Spawn {
            program: program.display().to_string(),
            source,
        })?;
        let pid = child.id();
        debug!("spawned {label} as pid {pid}: {} {argv:?}", program.display());

        let shared = Arc::new(Shared::default());
        let sup = shared.clone();
        thread::Builder::new()
            .name(format!("supervise-{pid}"))
            .spawn(move || {
                let status = loop {
                    match child.wait() {
                        Ok(s) => break s,
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                        Err(e) => {
                            warn!("wait on pid {pid} failed: {e}");
                            break ExitStatus::from_raw(-1);
                        }
                    }
                };
                let mut exit = sup.exit.lock().unwrap();
                exit.unsolicited = !exit.stop_requested;
                exit.status = Some(status);
                sup.exited.notify_all();
            })
            .map_err(|source| ProcessError::Spawn {
                program: "supervisor thread".into(),
                source,
            })?;

        Ok(ProcessNode {
            label: label.to_string(),
            pid,
            grace,
            log_path,
            shared,
            stop_result: Mutex::new(None),
        })
    }

    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Combined stdout/stderr of the child.
    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn exit_status(&self) -> Option<ExitStatus> {
        self.shared.exit.lock().unwrap().status
    }

    pub fn has_exited(&self) -> bool {
        self.exit_status().is_some()
    }

    /// Blocks until the child exits or `timeout` passes. Returns true if it
    /// exited.
    pub fn wait_exit(&self, timeout: Duration) -> bool {
        let exit = self.shared.exit.lock().unwrap();
        let (exit, _) = self
            .shared
            .exited
            .wait_timeout_while(exit, timeout, |e| e.status.is_none())
            .unwrap();
        exit.status.is_some()
    }

    fn stop_requested(&self) -> bool {
        self.shared.exit.lock().unwrap().stop_requested
    }

    fn failure_reason(&self, status: ExitStatus) -> String {
        match last_line(&self.log_path) {
            Some(line) => format!("{}: {line}", describe(status)),
            None => describe(status),
        }
    }

    fn terminate(&self) -> Result<(), NodeError> {
        if !self.has_exited() {
            signal_group(self.pid, libc::SIGTERM);
            if !self.wait_exit(self.grace) {
                warn!(
                    "{} (pid {}) ignored SIGTERM for {:?}; killing",
                    self.label, self.pid, self.grace
                );
                signal_group(self.pid, libc::SIGKILL);
                if !self.wait_exit(KILL_WAIT) {
                    return Err(NodeError::StopTimeout);
                }
            }
        }
        // sweep anything the child left in its group
        if !procfs::group_members(self.pid).is_empty() {
            signal_group(self.pid, libc::SIGKILL);
            let deadline = Instant::now() + KILL_WAIT;
            while !procfs::group_members(self.pid).is_empty() {
                if Instant::now() > deadline {
                    return Err(NodeError::StopTimeout);
                }
                thread::sleep(Duration::from_millis(5));
            }
        }
        Ok(())
    }
}

impl Node for ProcessNode {
    fn stop(&self) -> Result<(), NodeError> {
        let mut result = self.stop_result.lock().unwrap();
        if let Some(r) = &*result {
            return r.clone();
        }
        self.shared.exit.lock().unwrap().stop_requested = true;
        let r = self.terminate();
        *result = Some(r.clone());
        r
    }

    fn state(&self) -> NodeState {
        let exit = self.shared.exit.lock().unwrap();
        match exit.status {
            None => NodeState::Running,
            Some(status) if exit.unsolicited && !status.success() => {
                drop(exit);
                NodeState::Failed(self.failure_reason(status))
            }
            Some(_) => NodeState::Stopped,
        }
    }
}

impl Drop for ProcessNode {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

fn unique_log_path(workdir: &Path, label: &str) -> PathBuf {
    static NEXT: AtomicUsize = AtomicUsize::new(0);
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    workdir.join(format!("{safe}.{}.log", NEXT.fetch_add(1, Ordering::Relaxed)))
}

/// A process node with a request/reply port on the loopback interface.
#[derive(Debug)]
pub struct FirmwareNode {
    process: ProcessNode,
    address: SocketAddr,
    timeout: Duration,
    channel: Mutex<()>,
}

impl FirmwareNode {
    pub(crate) fn new(process: ProcessNode, address: SocketAddr, timeout: Duration) -> Self {
        FirmwareNode {
            process,
            address,
            timeout,
            channel: Mutex::new(()),
        }
    }

    pub fn address(&self) -> SocketAddr {
        self.address
    }

    pub fn port(&self) -> u16 {
        self.address.port()
    }

    pub fn process(&self) -> &ProcessNode {
        &self.process
    }

    fn closed_or_dead(&self) -> Option<NodeError> {
        if self.process.stop_requested() {
            return Some(NodeError::ChannelClosed);
        }
        self.process
            .exit_status()
            .map(|s| NodeError::NodeDead(describe(s)))
    }
}

impl Node for FirmwareNode {
    fn stop(&self) -> Result<(), NodeError> {
        self.process.stop()
    }

    fn state(&self) -> NodeState {
        self.process.state()
    }
}

impl CommunicationNode for FirmwareNode {
    fn send(&self, message: &Value) -> Result<Value, NodeError> {
        let _serial = self.channel.lock().unwrap();
        if let Some(err) = self.closed_or_dead() {
            return Err(err);
        }
        match request_reply(self.address, message, self.timeout) {
            Ok(reply) => Ok(reply),
            Err(err @ (TransportError::ConnectionRefused(_)
            | TransportError::ChannelClosed
            | TransportError::Eof
            | TransportError::Truncated
            | TransportError::Io(_))) => {
                // the child may have died mid-request
                self.process.wait_exit(Duration::from_millis(200));
                Err(self.closed_or_dead().unwrap_or_else(|| err.into()))
            }
            Err(err) => Err(err.into()),
        }
    }
}

/// Members of an attached group; index 0 is the host.
#[derive(Debug)]
pub struct GroupNode {
    members: Vec<ProcessNode>,
    ports: Vec<u16>,
}

impl GroupNode {
    pub(crate) fn new(members: Vec<ProcessNode>, ports: Vec<u16>) -> Self {
        GroupNode { members, ports }
    }

    pub fn members(&self) -> &[ProcessNode] {
        &self.members
    }

    pub fn host(&self) -> &ProcessNode {
        &self.members[0]
    }

    /// Group-scoped ports, `{p0}` first.
    pub fn ports(&self) -> &[u16] {
        &self.ports
    }
}

impl Node for GroupNode {
    fn stop(&self) -> Result<(), NodeError> {
        let mut first_err = None;
        for member in self.members.iter().rev() {
            if let Err(e) = member.stop() {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    fn state(&self) -> NodeState {
        let states: Vec<NodeState> = self.members.iter().map(|m| m.state()).collect();
        if let Some(failed) = states.iter().find(|s| matches!(s, NodeState::Failed(_))) {
            return failed.clone();
        }
        if states.iter().all(|s| *s == NodeState::Stopped) {
            NodeState::Stopped
        } else {
            NodeState::Running
        }
    }
}
