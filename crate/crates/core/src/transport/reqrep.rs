use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::Value;

use super::frame::{read_frame, write_frame};
use super::TransportError;

#[derive(Serialize)]
struct OpDoc<'a> {
    op: &'static str,
    payload: &'a Value,
}

fn op_body(op: &'static str, payload: &Value) -> Vec<u8> {
    serde_json::to_vec(&OpDoc { op, payload }).expect("JSON values always serialize")
}

fn parse_op(body: &[u8], expected: &str) -> Result<Value, String> {
    let value: Value = serde_json::from_slice(body).map_err(|e| e.to_string())?;
    let Value::Object(mut map) = value else {
        return Err("not an object".into());
    };
    match map.get("op").and_then(Value::as_str) {
        Some(op) if op == expected => {}
        other => return Err(format!("expected op {expected:?}, got {other:?}")),
    }
    map.remove("payload")
        .ok_or_else(|| "missing payload".to_string())
}

/// One request/reply exchange over a fresh connection.
pub fn request_reply(
    address: SocketAddr,
    request: &Value,
    timeout: Duration,
) -> Result<Value, TransportError> {
    let started = Instant::now();
    let mut stream = TcpStream::connect_timeout(&address, timeout).map_err(|e| match e.kind() {
        io::ErrorKind::ConnectionRefused => TransportError::ConnectionRefused(address.to_string()),
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => TransportError::Timeout(timeout),
        _ => e.into(),
    })?;
    stream.set_nodelay(true)?;
    let remaining = timeout
        .checked_sub(started.elapsed())
        .filter(|d| !d.is_zero())
        .ok_or(TransportError::Timeout(timeout))?;
    stream.set_read_timeout(Some(remaining))?;
    stream.set_write_timeout(Some(remaining))?;

    let result = (|| {
        write_frame(&mut stream, &op_body("req", request))?;
        let body = read_frame(&mut stream)?;
        parse_op(&body, "rep").map_err(TransportError::MalformedReply)
    })();
    let _ = stream.shutdown(std::net::Shutdown::Both);
    result.map_err(|e| match e {
        e if e.is_timeout() => TransportError::Timeout(timeout),
        TransportError::Eof | TransportError::Truncated => {
            TransportError::MalformedReply("connection closed before reply".into())
        }
        TransportError::BadJson(m) | TransportError::SchemaViolation(m) => {
            TransportError::MalformedReply(m)
        }
        other => other,
    })
}

/// Listening side of the request/reply channel.
pub struct ReplyServer {
    listener: TcpListener,
}

impl ReplyServer {
    pub fn bind(addr: SocketAddr) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr).map_err(|e| match e.kind() {
            io::ErrorKind::AddrInUse => TransportError::PortInUse(addr.port()),
            _ => e.into(),
        })?;
        listener.set_nonblocking(true)?;
        Ok(ReplyServer { listener })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Waits up to `wait` for one connection and answers every request on it
    /// until the peer hangs up. Returns whether a connection was served.
    pub fn serve_once<F>(&self, wait: Duration, mut handler: F) -> Result<bool, TransportError>
    where
        F: FnMut(Value) -> Value,
    {
        let deadline = Instant::now() + wait;
        let stream = loop {
            match self.listener.accept() {
                Ok((stream, _)) => break stream,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Ok(false);
                    }
                    thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_nonblocking(false)?;
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        loop {
            let body = match read_frame(&mut reader) {
                Ok(body) => body,
                Err(TransportError::Eof) => return Ok(true),
                Err(e) => return Err(e),
            };
            let reply = match parse_op(&body, "req") {
                Ok(payload) => handler(payload),
                Err(msg) => serde_json::json!({ "error": msg }),
            };
            let body = op_body("rep", &reply);
            if let Err(e) = write_frame(&mut writer, &body) {
                let fallback = serde_json::json!({ "error": e.to_string() });
                write_frame(&mut writer, &op_body("rep", &fallback))?;
            }
        }
    }

    /// Serves connections one at a time until `stop` is set.
    pub fn run_until<F>(&self, stop: &AtomicBool, mut handler: F) -> Result<(), TransportError>
    where
        F: FnMut(Value) -> Value,
    {
        while !stop.load(Ordering::SeqCst) {
            match self.serve_once(Duration::from_millis(50), &mut handler) {
                Ok(_) => {}
                Err(e) if e.is_timeout() => {}
                Err(TransportError::Truncated) => {}
                Err(TransportError::Io(e))
                    if matches!(
                        e.kind(),
                        io::ErrorKind::ConnectionReset | io::ErrorKind::BrokenPipe
                    ) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}
