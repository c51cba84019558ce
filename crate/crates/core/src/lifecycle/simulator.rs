use std::any::Any;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use log::{debug, warn};
use serde::Serialize;
use thiserror::Error;
use uuid::Uuid;

use super::env::ExecutionEnvironment;
use super::id::{NodeId, NodeToken};
use super::node::{Node, NodeState};

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("simulator already started; no more components can be added")]
    AlreadyStarted,
    #[error("component {label} ({node}) failed to start: {reason}")]
    StartupFailure {
        node: NodeToken,
        label: String,
        reason: String,
    },
    #[error("node id does not belong to this simulation")]
    UnknownNodeId,
    #[error("node {0} is not of the requested kind")]
    KindMismatch(NodeToken),
    #[error("simulation has been stopped")]
    StoppedSimulation,
    #[error("environment setup failed: {0}")]
    Environment(String),
}

/// Configuration for one simulation element. `start` launches it inside the
/// given environment and returns once the element is running.
pub trait Component: Send + Sync + 'static {
    type Node: Node;
    type Error: std::error::Error + Send + Sync + 'static;

    fn start(&self, env: &ExecutionEnvironment) -> Result<Self::Node, Self::Error>;

    /// Human-readable name used in status reports.
    fn label(&self) -> String {
        let name = std::any::type_name::<Self>();
        name.rsplit("::").next().unwrap_or(name).to_string()
    }
}

/// Builds and tears down the execution environment for one simulation run.
pub trait Backend: Send + Sync {
    fn setup(
        &self,
        simulation_id: Uuid,
    ) -> Result<(ExecutionEnvironment, Box<dyn EnvironmentGuard>), CoreError>;
}

/// Owns environment resources (broker, network, scratch dir) until teardown.
pub trait EnvironmentGuard: Send {
    /// Releases everything. Returns descriptions of anything that could not
    /// be cleaned up.
    fn teardown(&mut self) -> Vec<String>;
}

struct StartedNode {
    any: Arc<dyn Any + Send + Sync>,
    node: Arc<dyn Node>,
}

trait ErasedComponent: Send + Sync {
    fn start_erased(&self, env: &ExecutionEnvironment) -> Result<StartedNode, String>;
}

impl<C: Component> ErasedComponent for C {
    fn start_erased(&self, env: &ExecutionEnvironment) -> Result<StartedNode, String> {
        let node = Arc::new(self.start(env).map_err(|e| e.to_string())?);
        Ok(StartedNode {
            any: node.clone(),
            node,
        })
    }
}

struct Registration {
    token: NodeToken,
    label: String,
    component: Arc<dyn ErasedComponent>,
}

/// A set of configured components plus the backend that runs them.
///
/// Components start in the order they were added and stop in reverse.
/// A simulator can be started more than once; each start produces an
/// independent [`Simulation`] with fresh node instances.
pub struct Simulator<B> {
    backend: B,
    registrations: Vec<Registration>,
    started: bool,
}

impl<B: Backend> Simulator<B> {
    pub fn new(backend: B) -> Self {
        Simulator {
            backend,
            registrations: Vec::new(),
            started: false,
        }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn len(&self) -> usize {
        self.registrations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.registrations.is_empty()
    }

    pub fn add<C: Component>(&mut self, component: C) -> Result<NodeId<C::Node>, CoreError> {
        if self.started {
            return Err(CoreError::AlreadyStarted);
        }
        let token = NodeToken::fresh();
        self.registrations.push(Registration {
            token,
            label: Component::label(&component),
            component: Arc::new(component),
        });
        Ok(NodeId::new(token))
    }

    pub fn start(&mut self) -> Result<Simulation, CoreError> {
        self.started = true;
        let simulation_id = Uuid::new_v4();
        let (env, mut guard) = self.backend.setup(simulation_id)?;

        let mut members: Vec<Member> = Vec::with_capacity(self.registrations.len());
        for reg in &self.registrations {
            debug!("starting {} ({})", reg.label, reg.token);
            match reg.component.start_erased(&env) {
                Ok(started) => members.push(Member {
                    token: reg.token,
                    label: reg.label.clone(),
                    any: started.any,
                    node: started.node,
                }),
                Err(reason) => {
                    for member in members.iter().rev() {
                        if let Err(e) = member.node.stop() {
                            warn!("teardown of {} failed: {e}", member.label);
                        }
                    }
                    for leftover in guard.teardown() {
                        warn!("environment teardown: {leftover}");
                    }
                    return Err(CoreError::StartupFailure {
                        node: reg.token,
                        label: reg.label.clone(),
                        reason,
                    });
                }
            }
        }

        Ok(Simulation {
            id: simulation_id,
            env,
            members,
            stopped: AtomicBool::new(false),
            shutdown: Mutex::new(Shutdown {
                guard: Some(guard),
                status: None,
            }),
        })
    }
}

struct Member {
    token: NodeToken,
    label: String,
    any: Arc<dyn Any + Send + Sync>,
    node: Arc<dyn Node>,
}

struct Shutdown {
    guard: Option<Box<dyn EnvironmentGuard>>,
    status: Option<SimulationStatus>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeStatus {
    pub id: NodeToken,
    pub label: String,
    pub state: NodeState,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationStatus {
    pub simulation_id: Uuid,
    pub running: bool,
    /// Nodes in registration order.
    pub nodes: Vec<NodeStatus>,
    /// Resources that teardown could not release.
    pub leftovers: Vec<String>,
}

impl SimulationStatus {
    pub fn state_of(&self, token: NodeToken) -> Option<&NodeState> {
        self.nodes.iter().find(|n| n.id == token).map(|n| &n.state)
    }
}

/// A started set of nodes. Safe to share across threads; `stop` is
/// serialized and idempotent, and also runs on drop.
pub struct Simulation {
    id: Uuid,
    env: ExecutionEnvironment,
    members: Vec<Member>,
    stopped: AtomicBool,
    shutdown: Mutex<Shutdown>,
}

impl Simulation {
    pub fn id(&self) -> Uuid {
        self.id
    }

    pub fn environment(&self) -> &ExecutionEnvironment {
        &self.env
    }

    pub fn get<N: Node>(&self, id: &NodeId<N>) -> Result<Arc<N>, CoreError> {
        if self.stopped.load(Ordering::SeqCst) {
            return Err(CoreError::StoppedSimulation);
        }
        let member = self
            .members
            .iter()
            .find(|m| m.token == id.token())
            .ok_or(CoreError::UnknownNodeId)?;
        member
            .any
            .clone()
            .downcast::<N>()
            .map_err(|_| CoreError::KindMismatch(member.token))
    }

    /// Live snapshot, or the final status once stopped.
    pub fn status(&self) -> SimulationStatus {
        if let Some(status) = &self.shutdown.lock().unwrap().status {
            return status.clone();
        }
        SimulationStatus {
            simulation_id: self.id,
            running: true,
            nodes: self
                .members
                .iter()
                .map(|m| NodeStatus {
                    id: m.token,
                    label: m.label.clone(),
                    state: m.node.state(),
                })
                .collect(),
            leftovers: Vec::new(),
        }
    }

    /// Stops every node in reverse registration order, then tears down the
    /// environment. Per-node failures end up in the returned status.
    pub fn stop(&self) -> SimulationStatus {
        let mut shutdown = self.shutdown.lock().unwrap();
        if let Some(status) = &shutdown.status {
            return status.clone();
        }
        self.stopped.store(true, Ordering::SeqCst);

        let mut states = vec![NodeState::Stopped; self.members.len()];
        for (idx, member) in self.members.iter().enumerate().rev() {
            let before = member.node.state();
            let result = member.node.stop();
            states[idx] = match (before, result) {
                (NodeState::Failed(reason), _) => NodeState::Failed(reason),
                (_, Err(e)) => NodeState::Failed(e.to_string()),
                (_, Ok(())) => match member.node.state() {
                    NodeState::Failed(reason) => NodeState::Failed(reason),
                    _ => NodeState::Stopped,
                },
            };
        }

        let leftovers = shutdown
            .guard
            .take()
            .map(|mut g| g.teardown())
            .unwrap_or_default();

        let status = SimulationStatus {
            simulation_id: self.id,
            running: false,
            nodes: self
                .members
                .iter()
                .zip(states)
                .map(|(m, state)| NodeStatus {
                    id: m.token,
                    label: m.label.clone(),
                    state,
                })
                .collect(),
            leftovers,
        };
        shutdown.status = Some(status.clone());
        status
    }
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("id", &self.id)
            .field("nodes", &self.members.len())
            .field("stopped", &self.stopped.load(Ordering::SeqCst))
            .finish()
    }
}

impl Drop for Simulation {
    fn drop(&mut self) {
        self.stop();
    }
}
