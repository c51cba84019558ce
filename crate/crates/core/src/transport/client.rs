use std::collections::{HashMap, VecDeque};
use std::io::BufReader;
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use super::envelope::{MessageEnvelope, Topic};
use super::frame::{encode_body, envelope_from_value, read_frame, write_frame};
use super::remap::RemapTable;
use super::TransportError;

/// A delivered envelope together with the exact body bytes the broker sent.
#[derive(Debug, Clone)]
pub struct Received {
    pub envelope: MessageEnvelope,
    pub body: Vec<u8>,
}

struct Inbox {
    rx: Receiver<Inbound>,
    pending: VecDeque<Received>,
}

enum Inbound {
    Message(Received),
    Synced,
}

/// Broker connection usable as publisher and subscriber at once.
///
/// Outgoing topics pass through the client's [`RemapTable`]. Sequence
/// numbers are assigned per topic, starting at 0.
pub struct BrokerClient {
    writer: Mutex<TcpStream>,
    inbound: Mutex<Inbox>,
    seqs: Mutex<HashMap<String, u64>>,
    remap: RemapTable,
}

#[derive(Serialize)]
struct SubDoc<'a> {
    op: &'static str,
    topic: &'a str,
}

pub(crate) fn now_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

impl BrokerClient {
    pub fn connect(addr: SocketAddr) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr).map_err(|e| match e.kind() {
            std::io::ErrorKind::ConnectionRefused => {
                TransportError::ConnectionRefused(addr.to_string())
            }
            _ => e.into(),
        })?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("broker-client-rx".into())
            .spawn(move || read_loop(reader, tx))?;
        let client = BrokerClient {
            writer: Mutex::new(stream),
            inbound: Mutex::new(Inbox {
                rx,
                pending: VecDeque::new(),
            }),
            seqs: Mutex::new(HashMap::new()),
            remap: RemapTable::default(),
        };
        client.send_body(br#"{"op":"pub"}"#)?;
        Ok(client)
    }

    pub fn with_remap(mut self, remap: RemapTable) -> Self {
        self.remap = remap;
        self
    }

    pub fn remap(&self) -> &RemapTable {
        &self.remap
    }

    fn send_body(&self, body: &[u8]) -> Result<(), TransportError> {
        let mut w = self.writer.lock().unwrap();
        write_frame(&mut *w, body)
    }

    pub fn subscribe(&self, topic: &str) -> Result<(), TransportError> {
        Topic::new(topic)?;
        let body = serde_json::to_vec(&SubDoc { op: "sub", topic }).expect("serializable");
        self.send_body(&body)
    }

    /// Blocks until the broker has processed every frame sent before this
    /// call (including subscriptions).
    pub fn sync(&self, timeout: Duration) -> Result<(), TransportError> {
        self.send_body(br#"{"op":"sync"}"#)?;
        let deadline = Instant::now() + timeout;
        let mut inbound = self.inbound.lock().unwrap();
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match inbound.rx.recv_timeout(left) {
                Ok(Inbound::Synced) => return Ok(()),
                Ok(Inbound::Message(m)) => inbound.pending.push_back(m),
                Err(RecvTimeoutError::Timeout) => return Err(TransportError::Timeout(timeout)),
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::ChannelClosed),
            }
        }
    }

    /// Publishes `payload` on `topic` after remapping; returns the envelope
    /// as sent.
    pub fn publish(&self, topic: &str, payload: Value) -> Result<MessageEnvelope, TransportError> {
        let topic = Topic::new(self.remap.apply(topic))?;
        let seq = {
            let mut seqs = self.seqs.lock().unwrap();
            let next = seqs.entry(topic.as_str().to_string()).or_insert(0);
            let seq = *next;
            *next += 1;
            seq
        };
        let envelope = MessageEnvelope::new(topic, seq, now_ns(), payload);
        self.send_body(&encode_body(&envelope))?;
        Ok(envelope)
    }

    /// Sends an envelope as-is (no remap, caller-chosen seq and stamp).
    pub fn publish_envelope(&self, envelope: &MessageEnvelope) -> Result<(), TransportError> {
        self.send_body(&encode_body(envelope))
    }

    /// Next delivered message, `Ok(None)` on timeout.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Received>, TransportError> {
        let mut inbound = self.inbound.lock().unwrap();
        if let Some(m) = inbound.pending.pop_front() {
            return Ok(Some(m));
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match inbound.rx.recv_timeout(left) {
                Ok(Inbound::Message(m)) => return Ok(Some(m)),
                Ok(Inbound::Synced) => continue,
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::ChannelClosed),
            }
        }
    }

    pub fn close(&self) {
        let _ = self.writer.lock().unwrap().shutdown(Shutdown::Both);
    }
}

impl Drop for BrokerClient {
    fn drop(&mut self) {
        self.close();
    }
}

fn read_loop(stream: TcpStream, tx: Sender<Inbound>) {
    let mut reader = BufReader::new(stream);
    while let Ok(body) = read_frame(&mut reader) {
        let Ok(value) = serde_json::from_slice::<Value>(&body) else {
            continue;
        };
        let msg = if value.get("op").and_then(Value::as_str) == Some("synced") {
            Inbound::Synced
        } else {
            match envelope_from_value(value) {
                Ok(envelope) => Inbound::Message(Received { envelope, body }),
                Err(_) => continue,
            }
        };
        if tx.send(msg).is_err() {
            break;
        }
    }
}
