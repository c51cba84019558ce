use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::transport::TransportError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeState {
    Starting,
    Running,
    Stopped,
    Failed(String),
}

impl NodeState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, NodeState::Stopped | NodeState::Failed(_))
    }
}

impl Serialize for NodeState {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            NodeState::Starting => serializer.serialize_str("starting"),
            NodeState::Running => serializer.serialize_str("running"),
            NodeState::Stopped => serializer.serialize_str("stopped"),
            NodeState::Failed(reason) => serializer.collect_str(&format_args!("failed({reason})")),
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum NodeError {
    #[error("channel closed")]
    ChannelClosed,
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("node process is dead: {0}")]
    NodeDead(String),
    #[error("node did not terminate after forced kill")]
    StopTimeout,
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("node has no communication channel")]
    NoChannel,
    #[error("{0}")]
    Other(String),
}

impl From<TransportError> for NodeError {
    fn from(err: TransportError) -> Self {
        match err {
            TransportError::Timeout(d) => NodeError::Timeout(d),
            TransportError::MalformedReply(m) => NodeError::MalformedReply(m),
            TransportError::ConnectionRefused(addr) => NodeError::ConnectionRefused(addr),
            TransportError::ChannelClosed => NodeError::ChannelClosed,
            other => NodeError::Other(other.to_string()),
        }
    }
}

/// A running simulation element.
///
/// `stop` must be idempotent: calling it on an already stopped or crashed
/// node succeeds.
pub trait Node: Send + Sync + 'static {
    fn stop(&self) -> Result<(), NodeError>;

    fn state(&self) -> NodeState;
}

/// A node that accepts request documents and answers with exactly one reply.
pub trait CommunicationNode: Node {
    fn send(&self, message: &Value) -> Result<Value, NodeError>;

    /// Typed wrapper around [`send`](Self::send).
    fn send_as<M, R>(&self, message: &M) -> Result<R, NodeError>
    where
        Self: Sized,
        M: Serialize,
        R: DeserializeOwned,
    {
        let request =
            serde_json::to_value(message).map_err(|e| NodeError::Other(e.to_string()))?;
        let reply = self.send(&request)?;
        serde_json::from_value(reply).map_err(|e| NodeError::MalformedReply(e.to_string()))
    }
}
