//! Minimal client for the container engine HTTP API (v1.41).

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::time::Duration;

use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use rand::Rng;
use serde_json::{json, Value};
use thiserror::Error;

pub const API_VERSION: &str = "v1.41";
pub const HOST_ENV: &str = "DOCKER_HOST";
pub const DEFAULT_SOCKET: &str = "/var/run/docker.sock";
/// Every engine object created for a simulation carries this label.
pub const SIM_LABEL: &str = "cosim.sim";

const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("container engine unreachable at {endpoint}: {source}")]
    Unreachable {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("engine API error {status}: {message}")]
    Api { status: u16, message: String },
    #[error("image {image:?} is not present locally; run `docker pull {image}` first")]
    ImageMissing { image: String },
    #[error("container {container} has no host binding for port {port}/tcp")]
    NoBinding { container: String, port: u16 },
    #[error("engine protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

impl EngineError {
    pub fn is_not_found(&self) -> bool {
        matches!(self, EngineError::Api { status: 404, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Unix(PathBuf),
    /// `host:port`
    Tcp(String),
}

impl Endpoint {
    /// `$DOCKER_HOST` if set, else the default local socket.
    pub fn from_env() -> Result<Self, EngineError> {
        match std::env::var(HOST_ENV) {
            Ok(v) if !v.is_empty() => Self::parse(&v),
            _ => Ok(Endpoint::Unix(DEFAULT_SOCKET.into())),
        }
    }

    pub fn parse(s: &str) -> Result<Self, EngineError> {
        if let Some(path) = s.strip_prefix("unix://") {
            Ok(Endpoint::Unix(path.into()))
        } else if let Some(addr) = s.strip_prefix("tcp://").or_else(|| s.strip_prefix("http://")) {
            Ok(Endpoint::Tcp(addr.trim_end_matches('/').to_string()))
        } else {
            Err(EngineError::Invalid(format!("unsupported engine endpoint {s:?}")))
        }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Unix(p) => write!(f, "unix://{}", p.display()),
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetworkSpec {
    /// Join a bridge network.
    Attach(String),
    /// Reuse another container's network stack.
    ShareStack(String),
}

impl NetworkSpec {
    fn mode(&self) -> String {
        match self {
            NetworkSpec::Attach(net) => net.clone(),
            NetworkSpec::ShareStack(id) => format!("container:{id}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub image: String,
    pub argv: Vec<String>,
    pub network: NetworkSpec,
    /// Container ports published to engine-chosen host ports on loopback.
    pub ports: Vec<u16>,
    pub env: Vec<(String, String)>,
    pub labels: BTreeMap<String, String>,
}

/// A raw HTTP response.
#[derive(Debug)]
pub struct Response {
    pub status: u16,
    pub body: Vec<u8>,
}

impl Response {
    pub fn json(&self) -> Result<Value, EngineError> {
        if self.body.is_empty() {
            return Ok(Value::Null);
        }
        serde_json::from_slice(&self.body).map_err(|e| EngineError::Protocol(format!("bad JSON: {e}")))
    }

    fn message(&self) -> String {
        match serde_json::from_slice::<Value>(&self.body) {
            Ok(v) => v["message"]
                .as_str()
                .map(str::to_string)
                .unwrap_or_else(|| v.to_string()),
            Err(_) => String::from_utf8_lossy(&self.body).trim().to_string(),
        }
    }
}

/// Stateless: one connection per request, so it is safe to share.
#[derive(Debug, Clone)]
pub struct Engine {
    endpoint: Endpoint,
}

trait Stream: Read + Write {}
impl<T: Read + Write> Stream for T {}

impl Engine {
    pub fn new(endpoint: Endpoint) -> Self {
        Engine { endpoint }
    }

    pub fn from_env() -> Result<Self, EngineError> {
        Ok(Self::new(Endpoint::from_env()?))
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn connect(&self, timeout: Duration) -> Result<Box<dyn Stream>, EngineError> {
        let unreachable = |source| EngineError::Unreachable {
            endpoint: self.endpoint.to_string(),
            source,
        };
        match &self.endpoint {
            Endpoint::Unix(path) => {
                let s = UnixStream::connect(path).map_err(unreachable)?;
                s.set_read_timeout(Some(timeout)).map_err(unreachable)?;
                Ok(Box::new(s))
            }
            Endpoint::Tcp(addr) => {
                let s = TcpStream::connect(addr.as_str()).map_err(unreachable)?;
                s.set_read_timeout(Some(timeout)).map_err(unreachable)?;
                Ok(Box::new(s))
            }
        }
    }

    /// Sends one request under the pinned API version prefix.
    pub fn request(
        &self,
        method: &str,
        path: &str,
        body: Option<&Value>,
        timeout: Duration,
    ) -> Result<Response, EngineError> {
        let mut stream = self.connect(timeout)?;
        let body = body.map(|b| b.to_string()).unwrap_or_default();
        let head = format!(
            "{method} /{API_VERSION}{path} HTTP/1.1\r\nHost: engine\r\nConnection: close\r\n\
             Content-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            body.len()
        );
        let io_err = |e: io::Error| EngineError::Protocol(format!("{method} {path}: {e}"));
        stream.write_all(head.as_bytes()).map_err(io_err)?;
        stream.write_all(body.as_bytes()).map_err(io_err)?;
        stream.flush().map_err(io_err)?;
        let mut raw = Vec::new();
        stream.read_to_end(&mut raw).map_err(io_err)?;
        parse_response(&raw)
    }

    fn call(&self, method: &str, path: &str, body: Option<&Value>) -> Result<Response, EngineError> {
        self.request(method, path, body, REQUEST_TIMEOUT)
    }

    fn expect(resp: Response, ok: &[u16]) -> Result<Response, EngineError> {
        if ok.contains(&resp.status) {
            Ok(resp)
        } else {
            Err(EngineError::Api {
                status: resp.status,
                message: resp.message(),
            })
        }
    }

    pub fn ping(&self) -> Result<(), EngineError> {
        Self::expect(self.call("GET", "/_ping", None)?, &[200]).map(|_| ())
    }

    pub fn create_network(&self, name: &str, labels: &BTreeMap<String, String>) -> Result<String, EngineError> {
        let body = json!({
            "Name": name,
            "Driver": "bridge",
            "CheckDuplicate": true,
            "Labels": labels,
        });
        let resp = Self::expect(self.call("POST", "/networks/create", Some(&body))?, &[200, 201])?;
        id_of(&resp.json()?)
    }

    /// Creates `cosim-<8 hex>`, regenerating the suffix once on a name clash.
    pub fn create_unique_network(
        &self,
        labels: &BTreeMap<String, String>,
    ) -> Result<(String, String), EngineError> {
        let mut last = None;
        for _ in 0..2 {
            let name = format!("cosim-{:08x}", rand::thread_rng().gen::<u32>());
            match self.create_network(&name, labels) {
                Ok(id) => return Ok((id, name)),
                Err(e @ EngineError::Api { status: 409, .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("loop ran"))
    }

    pub fn inspect_network(&self, id: &str) -> Result<Value, EngineError> {
        Self::expect(self.call("GET", &format!("/networks/{}", enc(id)), None)?, &[200])?.json()
    }

    /// Gateway address of the network's first IPAM config.
    pub fn network_gateway(&self, id: &str) -> Result<String, EngineError> {
        let info = self.inspect_network(id)?;
        info["IPAM"]["Config"]
            .as_array()
            .and_then(|c| c.iter().find_map(|c| c["Gateway"].as_str()))
            .map(str::to_string)
            .ok_or_else(|| EngineError::Protocol(format!("network {id} has no gateway")))
    }

    /// Absent networks count as removed.
    pub fn remove_network(&self, id: &str) -> Result<(), EngineError> {
        Self::expect(self.call("DELETE", &format!("/networks/{}", enc(id)), None)?, &[200, 204, 404]).map(|_| ())
    }

    /// Creates and starts a container; nothing is pulled.
    pub fn run_container(&self, spec: &RunSpec) -> Result<String, EngineError> {
        if spec.image.is_empty() {
            return Err(EngineError::Invalid("empty image reference".into()));
        }
        if matches!(spec.network, NetworkSpec::ShareStack(_)) && !spec.ports.is_empty() {
            return Err(EngineError::Invalid(
                "containers sharing another stack cannot publish ports".into(),
            ));
        }
        let exposed: serde_json::Map<String, Value> =
            spec.ports.iter().map(|p| (format!("{p}/tcp"), json!({}))).collect();
        let bindings: serde_json::Map<String, Value> = spec
            .ports
            .iter()
            .map(|p| (format!("{p}/tcp"), json!([{"HostIp": "127.0.0.1", "HostPort": ""}])))
            .collect();
        let mut body = json!({
            "Image": spec.image,
            "Env": spec.env.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>(),
            "Labels": spec.labels,
            "ExposedPorts": exposed,
            "HostConfig": {
                "NetworkMode": spec.network.mode(),
                "PortBindings": bindings,
            },
        });
        if !spec.argv.is_empty() {
            body["Cmd"] = json!(spec.argv);
        }
        let resp = self.call("POST", "/containers/create", Some(&body))?;
        if resp.status == 404 && resp.message().to_lowercase().contains("image") {
            return Err(EngineError::ImageMissing {
                image: spec.image.clone(),
            });
        }
        let id = id_of(&Self::expect(resp, &[201])?.json()?)?;
        let started = self
            .call("POST", &format!("/containers/{}/start", enc(&id)), None)
            .and_then(|r| Self::expect(r, &[204, 304]));
        if let Err(e) = started {
            let _ = self.stop_remove(&id, 0);
            return Err(e);
        }
        Ok(id)
    }

    pub fn inspect_container(&self, id: &str) -> Result<Value, EngineError> {
        Self::expect(self.call("GET", &format!("/containers/{}/json", enc(id)), None)?, &[200])?.json()
    }

    /// Reads the engine-assigned host port back from inspection.
    pub fn resolve_host_port(&self, id: &str, container_port: u16) -> Result<u16, EngineError> {
        let info = self.inspect_container(id)?;
        let key = format!("{container_port}/tcp");
        info["NetworkSettings"]["Ports"][&key]
            .as_array()
            .and_then(|b| b.iter().find_map(|b| b["HostPort"].as_str()?.parse::<u16>().ok()))
            .filter(|&p| p != 0)
            .ok_or(EngineError::NoBinding {
                container: id.to_string(),
                port: container_port,
            })
    }

    /// Stops with a grace period, then force-removes. Already-removed
    /// containers are fine.
    pub fn stop_remove(&self, id: &str, grace_seconds: u64) -> Result<(), EngineError> {
        let timeout = REQUEST_TIMEOUT + Duration::from_secs(grace_seconds);
        let stop = self.request(
            "POST",
            &format!("/containers/{}/stop?t={grace_seconds}", enc(id)),
            None,
            timeout,
        )?;
        Self::expect(stop, &[204, 304, 404])?;
        let rm = self.call("DELETE", &format!("/containers/{}?force=true", enc(id)), None)?;
        Self::expect(rm, &[200, 204, 404]).map(|_| ())
    }

    /// Last non-empty line of the container's combined output.
    pub fn last_log_line(&self, id: &str) -> Option<String> {
        let resp = self
            .call("GET", &format!("/containers/{}/logs?stdout=true&stderr=true&tail=5", enc(id)), None)
            .ok()?;
        if resp.status != 200 {
            return None;
        }
        let text = String::from_utf8_lossy(&demux_logs(&resp.body)).into_owned();
        text.lines().rev().find(|l| !l.trim().is_empty()).map(|l| l.trim().to_string())
    }

    /// Ids of containers (any state) carrying `label=value`.
    pub fn containers_with_label(&self, label: &str, value: &str) -> Result<Vec<String>, EngineError> {
        let filters = json!({"label": [format!("{label}={value}")]}).to_string();
        let path = format!("/containers/json?all=true&filters={}", enc(&filters));
        ids_of(&Self::expect(self.call("GET", &path, None)?, &[200])?.json()?)
    }

    pub fn networks_with_label(&self, label: &str, value: &str) -> Result<Vec<String>, EngineError> {
        let filters = json!({"label": [format!("{label}={value}")]}).to_string();
        let path = format!("/networks?filters={}", enc(&filters));
        ids_of(&Self::expect(self.call("GET", &path, None)?, &[200])?.json()?)
    }
}

fn enc(s: &str) -> String {
    utf8_percent_encode(s, NON_ALPHANUMERIC).to_string()
}

fn id_of(v: &Value) -> Result<String, EngineError> {
    v["Id"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| EngineError::Protocol(format!("response without Id: {v}")))
}

fn ids_of(v: &Value) -> Result<Vec<String>, EngineError> {
    v.as_array()
        .ok_or_else(|| EngineError::Protocol("expected a list".into()))?
        .iter()
        .map(id_of)
        .collect()
}

fn parse_response(raw: &[u8]) -> Result<Response, EngineError> {
    let mut headers = [httparse::EMPTY_HEADER; 64];
    let mut resp = httparse::Response::new(&mut headers);
    let head_len = match resp.parse(raw) {
        Ok(httparse::Status::Complete(n)) => n,
        Ok(httparse::Status::Partial) => return Err(EngineError::Protocol("truncated response head".into())),
        Err(e) => return Err(EngineError::Protocol(format!("bad response: {e}"))),
    };
    let status = resp.code.unwrap_or(0);
    let header = |name: &str| {
        resp.headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case(name))
            .map(|h| String::from_utf8_lossy(h.value).trim().to_ascii_lowercase())
    };
    let rest = &raw[head_len..];
    let body = if header("transfer-encoding").is_some_and(|v| v.contains("chunked")) {
        dechunk(rest)?
    } else if let Some(len) = header("content-length") {
        let len: usize = len
            .parse()
            .map_err(|_| EngineError::Protocol("bad content-length".into()))?;
        rest.get(..len)
            .ok_or_else(|| EngineError::Protocol("truncated body".into()))?
            .to_vec()
    } else {
        rest.to_vec()
    };
    Ok(Response { status, body })
}

fn dechunk(mut data: &[u8]) -> Result<Vec<u8>, EngineError> {
    let bad = || EngineError::Protocol("bad chunked body".into());
    let mut out = Vec::new();
    loop {
        let line_end = data.windows(2).position(|w| w == b"\r\n").ok_or_else(bad)?;
        let size_text = std::str::from_utf8(&data[..line_end]).map_err(|_| bad())?;
        let size_text = size_text.split(';').next().unwrap_or("").trim();
        let size = usize::from_str_radix(size_text, 16).map_err(|_| bad())?;
        data = &data[line_end + 2..];
        if size == 0 {
            return Ok(out);
        }
        out.extend_from_slice(data.get(..size).ok_or_else(bad)?);
        data = data.get(size + 2..).ok_or_else(bad)?;
    }
}

/// Strips the 8-byte stream headers of non-TTY log output.
pub fn demux_logs(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut rest = data;
    while rest.len() >= 8 && rest[0] <= 2 && rest[1..4] == [0, 0, 0] {
        let size = u32::from_be_bytes([rest[4], rest[5], rest[6], rest[7]]) as usize;
        let end = (8 + size).min(rest.len());
        out.extend_from_slice(&rest[8..end]);
        rest = &rest[end..];
    }
    out.extend_from_slice(rest);
    out
}
