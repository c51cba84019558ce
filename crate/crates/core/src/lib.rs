//! Component-based multi-fidelity co-simulation.
//!
//! A simulation is assembled from independently executing [`Component`]s
//! (plants, controllers, sensors, attackers). A [`Simulator`] owns the
//! registered components and a backend that knows how to build their
//! execution environment; starting it yields a [`Simulation`] holding one
//! running [`Node`] per component, addressable through a typed [`NodeId`].
//!
//! Two backends ship:
//!
//! - [`process`]: components run as supervised child processes on loopback.
//! - [`container`]: components run as containers on a private bridge network,
//!   driven through the container engine HTTP API.
//!
//! Both speak the framed-TCP protocol in [`transport`]. The [`components`]
//! module holds desk-scale plant/controller/sensor models that can run as
//! processes or be stepped directly, and [`falsify`] drives scenarios from a
//! search-based test harness where simulator fidelity is part of the input
//! space.

pub mod components;
pub mod container;
pub mod falsify;
pub mod lifecycle;
pub mod process;
pub mod scenario;
pub mod trace;
pub mod transport;

pub use lifecycle::{
    Backend, CommunicationNode, Component, CoreError, EnvironmentGuard, ExecutionEnvironment,
    NetworkHandle, Node, NodeError, NodeId, NodeState, NodeStatus, NodeToken, PortAllocator,
    Simulation, SimulationStatus, Simulator,
};
pub use trace::Trace;
