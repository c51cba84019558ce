//! Lifecycle contracts shared by every backend.
//!
//! [`Component`] describes something startable, [`Node`] is the running
//! instance, [`Simulator`] collects components and [`Simulation`] owns the
//! nodes once started.

mod env;
mod id;
mod node;
mod simulator;

pub use env::{ExecutionEnvironment, NetworkHandle, PortAllocator};
pub use id::{NodeId, NodeToken};
pub use node::{CommunicationNode, Node, NodeError, NodeState};
pub use simulator::{
    Backend, Component, CoreError, EnvironmentGuard, NodeStatus, Simulation, SimulationStatus,
    Simulator,
};
