//! In-process stand-in for the container engine API.
//!
//! "Containers" are local processes: argv[0] `cosim-component` maps to the
//! built runner. Published ports map to the same host port, and every
//! network's gateway is 127.0.0.1.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use cosim::container::{Endpoint, Engine};
use percent_encoding::percent_decode_str;
use serde_json::{json, Value};

pub struct MockContainer {
    pub labels: BTreeMap<String, String>,
    pub network_mode: String,
    pub ports: Vec<u16>,
    child: Option<Child>,
    exit_code: Option<i32>,
    log: PathBuf,
}

impl MockContainer {
    fn running(&mut self) -> bool {
        if let Some(child) = &mut self.child {
            if let Ok(Some(status)) = child.try_wait() {
                self.exit_code = Some(status.code().unwrap_or(128 + 9));
                self.child = None;
            }
        }
        self.child.is_some()
    }

    fn terminate(&mut self, grace: Duration) {
        let Some(child) = &mut self.child else { return };
        let pgid = child.id() as i32;
        unsafe { libc::kill(-pgid, libc::SIGTERM) };
        let deadline = Instant::now() + grace;
        loop {
            if let Ok(Some(status)) = child.try_wait() {
                self.exit_code = Some(status.code().unwrap_or(128 + 15));
                break;
            }
            if Instant::now() >= deadline {
                unsafe { libc::kill(-pgid, libc::SIGKILL) };
                let _ = child.wait();
                self.exit_code = Some(137);
                break;
            }
            thread::sleep(Duration::from_millis(10));
        }
        self.child = None;
    }
}

#[derive(Default)]
pub struct State {
    pub networks: HashMap<String, (String, BTreeMap<String, String>)>,
    pub containers: HashMap<String, MockContainer>,
    pub images: HashSet<String>,
    /// Answer this many network creations with 409.
    pub force_conflicts: usize,
    pub requests: Vec<String>,
    next_id: u64,
}

pub struct MockEngine {
    pub state: Arc<Mutex<State>>,
    socket: PathBuf,
    _dir: tempfile::TempDir,
}

impl MockEngine {
    pub fn start(images: &[&str]) -> MockEngine {
        let dir = tempfile::tempdir().unwrap();
        let socket = dir.path().join("engine.sock");
        let listener = UnixListener::bind(&socket).unwrap();
        let state = Arc::new(Mutex::new(State {
            images: images.iter().map(|s| s.to_string()).collect(),
            ..State::default()
        }));
        let logs = dir.path().to_path_buf();
        let shared = state.clone();
        thread::spawn(move || {
            for conn in listener.incoming() {
                let Ok(conn) = conn else { break };
                let state = shared.clone();
                let logs = logs.clone();
                thread::spawn(move || serve(conn, &state, &logs));
            }
        });
        MockEngine {
            state,
            socket,
            _dir: dir,
        }
    }

    pub fn engine(&self) -> Engine {
        Engine::new(Endpoint::Unix(self.socket.clone()))
    }

    pub fn labeled_containers(&self, sim: &str) -> usize {
        let s = self.state.lock().unwrap();
        s.containers.values().filter(|c| c.labels.get("cosim.sim").map(String::as_str) == Some(sim)).count()
    }

    pub fn labeled_networks(&self, sim: &str) -> usize {
        let s = self.state.lock().unwrap();
        s.networks.values().filter(|n| n.1.get("cosim.sim").map(String::as_str) == Some(sim)).count()
    }
}

impl Drop for MockEngine {
    fn drop(&mut self) {
        let mut s = self.state.lock().unwrap();
        for c in s.containers.values_mut() {
            c.terminate(Duration::ZERO);
        }
    }
}

fn serve(mut conn: UnixStream, state: &Mutex<State>, logs: &Path) {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let (method, target, body) = loop {
        let n = match conn.read(&mut chunk) {
            Ok(0) | Err(_) => return,
            Ok(n) => n,
        };
        buf.extend_from_slice(&chunk[..n]);
        let mut headers = [httparse::EMPTY_HEADER; 32];
        let mut req = httparse::Request::new(&mut headers);
        if let Ok(httparse::Status::Complete(head)) = req.parse(&buf) {
            let len: usize = req
                .headers
                .iter()
                .find(|h| h.name.eq_ignore_ascii_case("content-length"))
                .and_then(|h| std::str::from_utf8(h.value).ok()?.trim().parse().ok())
                .unwrap_or(0);
            if buf.len() >= head + len {
                let body = buf[head..head + len].to_vec();
                break (req.method.unwrap().to_string(), req.path.unwrap().to_string(), body);
            }
        }
    };
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, reply, chunked) = handle(&method, &target, &body, state, logs);
    let text = match &reply {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        v => v.to_string(),
    };
    let head = if chunked {
        format!("HTTP/1.1 {status} X\r\nTransfer-Encoding: chunked\r\nConnection: close\r\n\r\n")
    } else {
        format!("HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", text.len())
    };
    let _ = conn.write_all(head.as_bytes());
    if chunked {
        let bytes = text.as_bytes();
        for piece in bytes.chunks(7) {
            let _ = write!(conn, "{:x}\r\n", piece.len());
            let _ = conn.write_all(piece);
            let _ = conn.write_all(b"\r\n");
        }
        let _ = conn.write_all(b"0\r\n\r\n");
    } else {
        let _ = conn.write_all(text.as_bytes());
    }
}

fn err(status: u16, message: impl Into<String>) -> (u16, Value, bool) {
    (status, json!({"message": message.into()}), false)
}

fn label_filter(query: &HashMap<String, String>) -> Option<(String, String)> {
    let filters: Value = serde_json::from_str(query.get("filters")?).ok()?;
    let l = filters["label"][0].as_str()?;
    let (k, v) = l.split_once('=')?;
    Some((k.to_string(), v.to_string()))
}

fn handle(method: &str, target: &str, body: &Value, state: &Mutex<State>, logs: &Path) -> (u16, Value, bool) {
    let (path, query) = target.split_once('?').unwrap_or((target, ""));
    let query: HashMap<String, String> = query
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), percent_decode_str(v).decode_utf8_lossy().into_owned()))
        .collect();
    let Some(path) = path.strip_prefix("/v1.41") else {
        return err(400, "unpinned API version");
    };
    let path = percent_decode_str(path).decode_utf8_lossy().into_owned();
    let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
    let mut s = state.lock().unwrap();
    s.requests.push(format!("{method} {target}"));
    match (method, parts.as_slice()) {
        ("GET", ["_ping"]) => (200, json!("OK"), false),
        ("POST", ["networks", "create"]) => {
            let name = body["Name"].as_str().unwrap_or_default().to_string();
            if s.force_conflicts > 0 {
                s.force_conflicts -= 1;
                return err(409, format!("network with name {name} already exists"));
            }
            if s.networks.values().any(|n| n.0 == name) {
                return err(409, format!("network with name {name} already exists"));
            }
            s.next_id += 1;
            let id = format!("net{:04}", s.next_id);
            let labels = serde_json::from_value(body["Labels"].clone()).unwrap_or_default();
            s.networks.insert(id.clone(), (name, labels));
            (201, json!({"Id": id}), false)
        }
        ("GET", ["networks"]) => {
            let filter = label_filter(&query);
            let ids: Vec<Value> = s
                .networks
                .iter()
                .filter(|(_, n)| filter.as_ref().map_or(true, |(k, v)| n.1.get(k) == Some(v)))
                .map(|(id, _)| json!({"Id": id}))
                .collect();
            (200, json!(ids), true)
        }
        ("GET", ["networks", id]) => match s.networks.get(*id) {
            Some((name, labels)) => (
                200,
                json!({"Id": id, "Name": name, "Labels": labels, "IPAM": {"Config": [{"Subnet": "127.0.0.0/8", "Gateway": "127.0.0.1"}]}}),
                false,
            ),
            None => err(404, format!("network {id} not found")),
        },
        ("DELETE", ["networks", id]) => {
            let id = id.to_string();
            let Some((name, _)) = s.networks.get(&id).cloned() else {
                return err(404, "not found");
            };
            if s.containers.values().any(|c| c.network_mode == id || c.network_mode == name) {
                return err(403, format!("error while removing network: network {name} has active endpoints"));
            }
            s.networks.remove(&id);
            (204, Value::Null, false)
        }
        ("POST", ["containers", "create"]) => {
            let image = body["Image"].as_str().unwrap_or_default().to_string();
            if !s.images.contains(&image) {
                return err(404, format!("No such image: {image}"));
            }
            let mode = body["HostConfig"]["NetworkMode"].as_str().unwrap_or_default().to_string();
            match mode.strip_prefix("container:") {
                Some(host) if !s.containers.contains_key(host) => return err(404, "no such container"),
                None if !s.networks.contains_key(&mode) && !s.networks.values().any(|n| n.0 == mode) => {
                    return err(404, format!("network {mode} not found"))
                }
                _ => {}
            }
            let ports: Vec<u16> = body["HostConfig"]["PortBindings"]
                .as_object()
                .map(|m| m.keys().filter_map(|k| k.strip_suffix("/tcp")?.parse().ok()).collect())
                .unwrap_or_default();
            let argv: Vec<String> = serde_json::from_value(body["Cmd"].clone()).unwrap_or_default();
            s.next_id += 1;
            let id = format!("c{:04}", s.next_id);
            let log = logs.join(format!("{id}.log"));
            let labels = serde_json::from_value(body["Labels"].clone()).unwrap_or_default();
            let env: Vec<String> = serde_json::from_value(body["Env"].clone()).unwrap_or_default();
            s.containers.insert(
                id.clone(),
                MockContainer {
                    labels,
                    network_mode: mode,
                    ports,
                    child: None,
                    exit_code: None,
                    log: log.clone(),
                },
            );
            // stash argv/env for start
            std::fs::write(logs.join(format!("{id}.argv")), json!({"argv": argv, "env": env}).to_string()).unwrap();
            (201, json!({"Id": id}), false)
        }
        ("POST", ["containers", id, "start"]) => {
            let id = id.to_string();
            let Some(c) = s.containers.get_mut(&id) else {
                return err(404, "no such container");
            };
            let spec: Value =
                serde_json::from_str(&std::fs::read_to_string(logs.join(format!("{id}.argv"))).unwrap()).unwrap();
            let mut argv: Vec<String> = serde_json::from_value(spec["argv"].clone()).unwrap();
            if argv.is_empty() {
                argv.push("true".into());
            }
            if argv[0] == "cosim-component" {
                argv[0] = env!("CARGO_BIN_EXE_cosim-component").into();
            }
            let out = File::create(&c.log).unwrap();
            let mut cmd = Command::new(&argv[0]);
            cmd.args(&argv[1..])
                .stdin(Stdio::null())
                .stdout(out.try_clone().unwrap())
                .stderr(out)
                .process_group(0);
            for kv in spec["env"].as_array().unwrap() {
                if let Some((k, v)) = kv.as_str().unwrap().split_once('=') {
                    cmd.env(k, v);
                }
            }
            match cmd.spawn() {
                Ok(child) => {
                    c.child = Some(child);
                    (204, Value::Null, false)
                }
                Err(e) => err(500, format!("exec failed: {e}")),
            }
        }
        ("GET", ["containers", "json"]) => {
            let filter = label_filter(&query);
            let ids: Vec<Value> = s
                .containers
                .iter()
                .filter(|(_, c)| filter.as_ref().map_or(true, |(k, v)| c.labels.get(k) == Some(v)))
                .map(|(id, _)| json!({"Id": id}))
                .collect();
            (200, json!(ids), true)
        }
        ("GET", ["containers", id, "json"]) => {
            let Some(c) = s.containers.get_mut(*id) else {
                return err(404, format!("No such container: {id}"));
            };
            let running = c.running();
            let started = c.child.is_some() || c.exit_code.is_some();
            let ports: serde_json::Map<String, Value> = c
                .ports
                .iter()
                .map(|p| (format!("{p}/tcp"), json!([{"HostIp": "127.0.0.1", "HostPort": p.to_string()}])))
                .collect();
            let status = if running {
                "running"
            } else if started {
                "exited"
            } else {
                "created"
            };
            (
                200,
                json!({
                    "Id": id,
                    "State": {"Running": running, "Status": status, "ExitCode": c.exit_code.unwrap_or(0)},
                    "HostConfig": {"NetworkMode": c.network_mode},
                    "NetworkSettings": {"Ports": ports},
                    "Config": {"Labels": c.labels},
                }),
                false,
            )
        }
        ("GET", ["containers", id, "logs"]) => {
            let Some(c) = s.containers.get(*id) else {
                return err(404, "no such container");
            };
            let text = std::fs::read(&c.log).unwrap_or_default();
            let mut framed = vec![1u8, 0, 0, 0];
            framed.extend_from_slice(&(text.len() as u32).to_be_bytes());
            framed.extend_from_slice(&text);
            // the body is binary; smuggle it through as latin-1-free bytes
            (200, Value::String(String::from_utf8_lossy(&framed).into_owned()), false)
        }
        ("POST", ["containers", id, "stop"]) => {
            let grace: u64 = query.get("t").and_then(|t| t.parse().ok()).unwrap_or(10);
            let Some(c) = s.containers.get_mut(*id) else {
                return err(404, "no such container");
            };
            if !c.running() {
                return (304, Value::Null, false);
            }
            c.terminate(Duration::from_secs(grace));
            (204, Value::Null, false)
        }
        ("DELETE", ["containers", id]) => {
            let Some(mut c) = s.containers.remove(*id) else {
                return err(404, format!("No such container: {id}"));
            };
            c.terminate(Duration::ZERO);
            (204, Value::Null, false)
        }
        _ => err(404, format!("page not found: {method} {path}")),
    }
}
