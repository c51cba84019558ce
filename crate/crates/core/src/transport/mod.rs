//! Framed-TCP message transport.
//!
//! Every unit on the wire is a frame: a 4-byte big-endian length followed by
//! that many bytes of UTF-8 JSON. Frame bodies are either message envelopes
//! (`{"topic","seq","stamp_ns","payload"}`, keys in that order) or control
//! documents carrying an `"op"` key:
//!
//! | op       | direction        | meaning                                   |
//! |----------|------------------|-------------------------------------------|
//! | `sub`    | client -> broker | subscribe to the exact `topic`            |
//! | `pub`    | client -> broker | announce publisher role (optional)        |
//! | `sync`   | client -> broker | broker answers `synced` once prior frames are processed |
//! | `req`    | client -> server | one request `payload`                     |
//! | `rep`    | server -> client | the single reply `payload`                |

mod broker;
mod client;
mod envelope;
mod frame;
mod remap;
mod reqrep;

use std::io;
use std::time::Duration;

use thiserror::Error;

pub use broker::Broker;
pub use client::{BrokerClient, Received};
pub use envelope::{MessageEnvelope, Topic};
pub use frame::{
    decode_frame, encode_body, encode_frame, envelope_from_body, payload_slice, read_frame,
    write_frame, MAX_FRAME_LEN,
};
pub use remap::{apply_remap, RemapTable};
pub use reqrep::{request_reply, ReplyServer};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("frame body of {0} bytes exceeds the 16 MiB limit")]
    OversizeMessage(usize),
    #[error("stream ended in the middle of a frame")]
    Truncated,
    #[error("stream closed at a frame boundary")]
    Eof,
    #[error("frame body is not valid JSON: {0}")]
    BadJson(String),
    #[error("frame body violates the envelope schema: {0}")]
    SchemaViolation(String),
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
    #[error("invalid remap table: {0}")]
    InvalidRemap(String),
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("connection refused by {0}")]
    ConnectionRefused(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("channel closed")]
    ChannelClosed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TransportError {
    pub(crate) fn is_timeout(&self) -> bool {
        match self {
            TransportError::Timeout(_) => true,
            TransportError::Io(e) => {
                matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
            }
            _ => false,
        }
    }
}
