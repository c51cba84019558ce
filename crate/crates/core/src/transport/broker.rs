use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use log::{debug, warn};
use serde_json::Value;

use super::frame::{envelope_from_value, read_frame, write_frame};
use super::TransportError;

/// Per-subscriber queue depth; a subscriber that falls further behind is
/// disconnected.
pub(crate) const SUBSCRIBER_QUEUE: usize = 1024;

type FrameBody = Arc<[u8]>;

#[derive(Default)]
struct Routes {
    /// topic -> subscribed connection ids
    topics: HashMap<String, Vec<u64>>,
    /// connection id -> outgoing queue
    outboxes: HashMap<u64, SyncSender<FrameBody>>,
}

impl Routes {
    fn drop_connection(&mut self, conn: u64) {
        self.outboxes.remove(&conn);
        for subs in self.topics.values_mut() {
            subs.retain(|c| *c != conn);
        }
        self.topics.retain(|_, subs| !subs.is_empty());
    }
}

struct Shared {
    routes: Mutex<Routes>,
    streams: Mutex<HashMap<u64, TcpStream>>,
    shutdown: AtomicBool,
    next_conn: AtomicU64,
}

/// Centralized pub/sub broker with exact-topic routing.
///
/// Envelope frames are forwarded byte-for-byte to every current subscriber
/// of their topic. Delivery is at-most-once with no persistence.
pub struct Broker {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl Broker {
    pub fn serve(addr: SocketAddr) -> Result<Broker, TransportError> {
        let listener = TcpListener::bind(addr).map_err(|e| match e.kind() {
            io::ErrorKind::AddrInUse => TransportError::PortInUse(addr.port()),
            _ => e.into(),
        })?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            routes: Mutex::new(Routes::default()),
            streams: Mutex::new(HashMap::new()),
            shutdown: AtomicBool::new(false),
            next_conn: AtomicU64::new(0),
        });
        let accept_shared = shared.clone();
        let accept = thread::Builder::new()
            .name("broker-accept".into())
            .spawn(move || accept_loop(listener, accept_shared))?;
        debug!("broker listening on {addr}");
        Ok(Broker {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn connection_count(&self) -> usize {
        self.shared.streams.lock().unwrap().len()
    }

    pub fn stop(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip([127, 0, 0, 1].into());
        }
        let _ = TcpStream::connect(wake);
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
        for (_, stream) in self.shared.streams.lock().unwrap().drain() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        let mut routes = self.shared.routes.lock().unwrap();
        routes.topics.clear();
        routes.outboxes.clear();
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("broker accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let conn = shared.next_conn.fetch_add(1, Ordering::SeqCst);
        let Ok(registered) = stream.try_clone() else {
            continue;
        };
        shared.streams.lock().unwrap().insert(conn, registered);
        let conn_shared = shared.clone();
        let spawned = thread::Builder::new()
            .name(format!("broker-conn-{conn}"))
            .spawn(move || serve_connection(conn, stream, conn_shared));
        if let Err(e) = spawned {
            warn!("could not spawn connection thread: {e}");
            shared.streams.lock().unwrap().remove(&conn);
        }
    }
}

fn serve_connection(conn: u64, stream: TcpStream, shared: Arc<Shared>) {
    let mut reader = match stream.try_clone() {
        Ok(s) => BufReader::new(s),
        Err(_) => return,
    };
    let mut writer: Option<JoinHandle<()>> = None;
    loop {
        let body = match read_frame(&mut reader) {
            Ok(body) => body,
            Err(TransportError::Eof) => break,
            Err(e) => {
                if !shared.shutdown.load(Ordering::SeqCst) {
                    debug!("connection {conn} closed: {e}");
                }
                break;
            }
        };
        let value: Value = match serde_json::from_slice(&body) {
            Ok(v) => v,
            Err(e) => {
                warn!("connection {conn}: dropping non-JSON frame: {e}");
                continue;
            }
        };
        match value.get("op").and_then(Value::as_str) {
            Some("sub") => {
                let Some(topic) = value.get("topic").and_then(Value::as_str) else {
                    warn!("connection {conn}: sub without topic");
                    continue;
                };
                if writer.is_none() {
                    writer = start_writer(conn, &stream, &shared);
                }
                let mut routes = shared.routes.lock().unwrap();
                let subs = routes.topics.entry(topic.to_string()).or_default();
                if !subs.contains(&conn) {
                    subs.push(conn);
                }
            }
            Some("pub") => {}
            Some("sync") => {
                if writer.is_none() {
                    writer = start_writer(conn, &stream, &shared);
                }
                let ack: FrameBody = Arc::from(&br#"{"op":"synced"}"#[..]);
                let outbox = shared.routes.lock().unwrap().outboxes.get(&conn).cloned();
                if let Some(outbox) = outbox {
                    let _ = outbox.try_send(ack);
                }
            }
            Some(other) => warn!("connection {conn}: unknown op {other:?}"),
            None => match envelope_from_value(value) {
                Ok(envelope) => forward(conn, envelope.topic.as_str(), body.into(), &shared),
                Err(e) => warn!("connection {conn}: dropping invalid envelope: {e}"),
            },
        }
    }
    shared.routes.lock().unwrap().drop_connection(conn);
    if let Some(stream) = shared.streams.lock().unwrap().remove(&conn) {
        let _ = stream.shutdown(Shutdown::Both);
    }
    if let Some(handle) = writer {
        let _ = handle.join();
    }
}

fn start_writer(conn: u64, stream: &TcpStream, shared: &Arc<Shared>) -> Option<JoinHandle<()>> {
    let mut out = stream.try_clone().ok()?;
    let (tx, rx) = mpsc::sync_channel::<FrameBody>(SUBSCRIBER_QUEUE);
    shared.routes.lock().unwrap().outboxes.insert(conn, tx);
    thread::Builder::new()
        .name(format!("broker-out-{conn}"))
        .spawn(move || {
            for body in rx {
                if write_frame(&mut out, &body).is_err() {
                    break;
                }
            }
        })
        .ok()
}

fn forward(from: u64, topic: &str, body: FrameBody, shared: &Shared) {
    let mut overflowed = Vec::new();
    {
        let routes = shared.routes.lock().unwrap();
        let Some(subs) = routes.topics.get(topic) else {
            return;
        };
        for conn in subs {
            let Some(outbox) = routes.outboxes.get(conn) else {
                continue;
            };
            match outbox.try_send(body.clone()) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) => overflowed.push(*conn),
                Err(TrySendError::Disconnected(_)) => {}
            }
        }
    }
    for conn in overflowed {
        warn!("subscriber {conn} fell {SUBSCRIBER_QUEUE} messages behind (publisher {from}); disconnecting");
        shared.routes.lock().unwrap().drop_connection(conn);
        if let Some(stream) = shared.streams.lock().unwrap().get(&conn) {
            let _ = stream.shutdown(Shutdown::Both);
        }
    }
}
