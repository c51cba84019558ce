use std::fmt;
use std::hash::{Hash, Hasher};
use std::marker::PhantomData;

use serde::{Serialize, Serializer};

/// Opaque 128-bit random token behind every [`NodeId`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeToken(u128);

impl NodeToken {
    pub(crate) fn fresh() -> Self {
        NodeToken(rand::random())
    }

    pub fn as_u128(self) -> u128 {
        self.0
    }
}

impl fmt::Display for NodeToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Debug for NodeToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeToken({self})")
    }
}

impl Serialize for NodeToken {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Handle returned by [`Simulator::add`](super::Simulator::add).
///
/// The type parameter names the node type that [`Simulation::get`](super::Simulation::get)
/// hands back for this id. Equality and hashing only look at the token.
pub struct NodeId<N> {
    token: NodeToken,
    _kind: PhantomData<fn() -> N>,
}

impl<N> NodeId<N> {
    pub(crate) fn new(token: NodeToken) -> Self {
        NodeId {
            token,
            _kind: PhantomData,
        }
    }

    pub fn token(&self) -> NodeToken {
        self.token
    }

    /// Name of the node type this id retrieves.
    pub fn node_kind(&self) -> &'static str {
        std::any::type_name::<N>()
    }
}

impl<N> Clone for NodeId<N> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<N> Copy for NodeId<N> {}

impl<N> PartialEq for NodeId<N> {
    fn eq(&self, other: &Self) -> bool {
        self.token == other.token
    }
}

impl<N> Eq for NodeId<N> {}

impl<N> Hash for NodeId<N> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.token.hash(state)
    }
}

impl<N> fmt::Debug for NodeId<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeId")
            .field("token", &self.token)
            .field("node_kind", &self.node_kind())
            .finish()
    }
}
