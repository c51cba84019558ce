//! Local child-process backend.
//!
//! Components run as supervised children on the loopback interface, each in
//! its own process group so that stopping a node also reaches anything it
//! forked. The broker runs in-process on an ephemeral loopback port.

mod component;
mod node;
pub mod procfs;
pub mod template;

use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::Arc;

use log::warn;
use tempfile::TempDir;
use thiserror::Error;
use uuid::Uuid;

pub use component::{
    component_runner, set_component_runner, AttachedProcessGroup, Executable,
    FirmwareProcessComponent, ProcessComponent, RUNNER_ENV,
};
pub use node::{FirmwareNode, GroupNode, ProcessNode, DEFAULT_GRACE, DEFAULT_SEND_TIMEOUT};
pub use template::TemplateError;

use crate::lifecycle::{
    Backend, CoreError, EnvironmentGuard, ExecutionEnvironment, NetworkHandle, PortAllocator,
};
use crate::transport::{Broker, TransportError};

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("failed to spawn {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("port allocation failed: {0}")]
    Port(io::Error),
    #[error("{label} did not become ready: {reason}")]
    NotReady { label: String, reason: String },
    #[error("argument template does not reference {{{0}}}")]
    MissingPortVariable(String),
    #[error("attached group needs at least one member")]
    EmptyGroup,
}

const BROKER_ATTEMPTS: usize = 8;

/// Runs simulations as local processes.
#[derive(Debug, Clone, Default)]
pub struct ProcessBackend {
    broker_port: Option<u16>,
}

impl ProcessBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tries `port` for the broker first; falls back to fresh ephemeral
    /// ports if it is taken.
    pub fn with_broker_port(port: u16) -> Self {
        ProcessBackend {
            broker_port: Some(port),
        }
    }

    fn start_broker(&self, ports: &PortAllocator) -> Result<Broker, CoreError> {
        let mut candidate = self.broker_port;
        let mut last_err = None;
        for _ in 0..BROKER_ATTEMPTS {
            let port = match candidate.take() {
                Some(p) => p,
                None => ports
                    .allocate()
                    .map_err(|e| CoreError::Environment(format!("port allocation: {e}")))?,
            };
            match Broker::serve(SocketAddr::from((Ipv4Addr::LOCALHOST, port))) {
                Ok(broker) => {
                    ports.reserve(port);
                    return Ok(broker);
                }
                Err(TransportError::PortInUse(p)) => {
                    warn!("broker port {p} in use; retrying");
                    last_err = Some(TransportError::PortInUse(p));
                }
                Err(e) => return Err(CoreError::Environment(format!("broker: {e}"))),
            }
        }
        Err(CoreError::Environment(format!(
            "broker could not bind after {BROKER_ATTEMPTS} attempts: {}",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )))
    }
}

struct ProcessGuard {
    broker: Option<Broker>,
    workdir: Option<TempDir>,
}

impl EnvironmentGuard for ProcessGuard {
    fn teardown(&mut self) -> Vec<String> {
        let mut leftovers = Vec::new();
        if let Some(mut broker) = self.broker.take() {
            broker.stop();
        }
        if let Some(dir) = self.workdir.take() {
            let path = dir.path().display().to_string();
            if let Err(e) = dir.close() {
                leftovers.push(format!("workdir {path}: {e}"));
            }
        }
        leftovers
    }
}

impl Backend for ProcessBackend {
    fn setup(
        &self,
        simulation_id: Uuid,
    ) -> Result<(ExecutionEnvironment, Box<dyn EnvironmentGuard>), CoreError> {
        let ports = Arc::new(PortAllocator::loopback());
        let broker = self.start_broker(&ports)?;
        let workdir = tempfile::Builder::new()
            .prefix("cosim-")
            .tempdir()
            .map_err(|e| CoreError::Environment(format!("workdir: {e}")))?;
        let env = ExecutionEnvironment {
            simulation_id,
            broker_address: broker.local_addr(),
            ports,
            network: NetworkHandle::Loopback,
            workdir: workdir.path().to_path_buf(),
        };
        Ok((
            env,
            Box::new(ProcessGuard {
                broker: Some(broker),
                workdir: Some(workdir),
            }),
        ))
    }
}
