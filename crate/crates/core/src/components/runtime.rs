//! Process entry points for the bundled component kinds.
//!
//! Plant and controller run in lockstep over the broker: the plant
//! publishes `state` and `gps` for step k (re-publishing every 50 ms) and
//! advances only when a `cmd` for step k arrives. Everything a component
//! emits is therefore a pure function of its configuration and inputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use super::autopilot::{run_mission, MissionConfig};
use super::fsa::{fsa_step, FsaParams, FsaState};
use super::gps::{gps_relay, GeoOrigin};
use super::rng::NoiseRng;
use super::rover::{rover_step, DriveCommand, PhysicsConfig, RoverState};
use crate::trace::Trace;
use crate::transport::{request_reply, BrokerClient, RemapTable, ReplyServer, Topic};

pub const STATE_TOPIC: &str = "state";
pub const GPS_TOPIC: &str = "gps";
pub const CMD_TOPIC: &str = "cmd";

const REPUBLISH: Duration = Duration::from_millis(50);
const POLL: Duration = Duration::from_millis(10);
const SYNC_TIMEOUT: Duration = Duration::from_secs(5);
/// How long a controller waits for the plant before giving up on a mission.
const PLANT_SILENCE: Duration = Duration::from_secs(10);

#[derive(Debug, Parser)]
#[command(name = "cosim-component", about = "Run a bundled simulation component")]
struct Cli {
    #[command(subcommand)]
    kind: Kind,
}

#[derive(Debug, Args)]
struct Common {
    /// Broker address (host:port).
    #[arg(long)]
    broker: Option<SocketAddr>,
    /// Publish-side topic remapping, `src=dst`.
    #[arg(long = "remap")]
    remap: Vec<String>,
    /// Free-form marker, only used to find the process in the process table.
    #[arg(long, hide = true)]
    tag: Option<String>,
}

impl Common {
    fn remap_table(&self) -> Result<RemapTable, String> {
        let joined = self.remap.join(",");
        if joined.is_empty() {
            return Ok(RemapTable::default());
        }
        joined.parse().map_err(|e| format!("--remap: {e}"))
    }

    fn connect(&self) -> Result<BrokerClient, String> {
        let addr = self.broker.ok_or("--broker is required")?;
        let client = BrokerClient::connect(addr).map_err(|e| format!("broker {addr}: {e}"))?;
        Ok(client.with_remap(self.remap_table()?))
    }
}

#[derive(Debug, Args)]
struct Server {
    /// Request/reply port.
    #[arg(long)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
}

impl Server {
    fn bind(&self) -> Result<ReplyServer, String> {
        ReplyServer::bind(SocketAddr::new(self.bind, self.port))
            .map_err(|e| format!("bind {}:{}: {e}", self.bind, self.port))
    }
}

#[derive(Debug, Subcommand)]
enum Kind {
    /// Ackermann rover plant publishing `state` and `gps`, driven by `cmd`.
    RoverPlant {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.01)]
        step_size: f64,
        #[arg(long, default_value_t = 10)]
        iterations: u32,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        origin_lat: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        origin_lon: f64,
    },
    /// Square-patrol controller; answers Mission{speed, duration?} with a trace.
    FsaController {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        server: Server,
        #[arg(long, default_value_t = 10.0)]
        side_length: f64,
        #[arg(long, default_value_t = 0.02)]
        heading_tol: f64,
        /// Take position from `gps` instead of `state`.
        #[arg(long)]
        use_gps: bool,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        origin_lat: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        origin_lon: f64,
    },
    /// Re-publishes GPS fixes with Gaussian noise.
    GpsRelay {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "gps_raw")]
        input: String,
        #[arg(long, default_value = "gps")]
        output: String,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Waypoint autopilot; answers a mission request with a trace.
    Autopilot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        server: Server,
        #[arg(long, default_value_t = 0.05)]
        step_size: f64,
        #[arg(long, default_value_t = 1)]
        iterations: u32,
    },
    #[command(hide = true)]
    Sleep {
        #[command(flatten)]
        common: Common,
        /// Extra sleeping processes to fork.
        #[arg(long, default_value_t = 0)]
        children: u32,
    },
    #[command(hide = true)]
    TrapTerm {
        #[command(flatten)]
        common: Common,
    },
    #[command(hide = true)]
    Crash {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        after_ms: u64,
        #[arg(long, default_value_t = 3)]
        code: i32,
    },
    #[command(hide = true)]
    StopLog {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: std::path::PathBuf,
        #[arg(long)]
        name: String,
    },
    #[command(hide = true)]
    Echo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        server: Server,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
    #[command(hide = true)]
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        connect: SocketAddr,
        #[arg(long)]
        out: std::path::PathBuf,
    },
}

/// Names of the listed (non-test) kinds.
pub const KIND_NAMES: [&str; 4] = ["rover-plant", "fsa-controller", "gps-relay", "autopilot"];

fn termination_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        let _ = signal_hook::flag::register(sig, flag.clone());
    }
    flag
}

fn idle_until(flag: &AtomicBool) {
    while !flag.load(Ordering::SeqCst) {
        thread::sleep(POLL);
    }
}

/// Runs a component. `args[0]` is the program name. Returns the exit code:
/// 0 after a termination signal, 1 on runtime failure, 2 on bad arguments.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let term = termination_flag();
    match run(cli.kind, &term) {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn run(kind: Kind, term: &Arc<AtomicBool>) -> Result<(), String> {
    match kind {
        Kind::RoverPlant {
            common,
            step_size,
            iterations,
            origin_lat,
            origin_lon,
        } => {
            let cfg = PhysicsConfig::new(step_size, iterations).map_err(|e| e.to_string())?;
            let origin = GeoOrigin {
                lat: origin_lat,
                lon: origin_lon,
            };
            rover_plant(&common.connect()?, cfg, origin, term)
        }
        Kind::FsaController {
            common,
            server,
            side_length,
            heading_tol,
            use_gps,
            origin_lat,
            origin_lon,
        } => {
            let ctl = Controller {
                client: common.connect()?,
                side_length,
                heading_tol,
                use_gps,
                origin: GeoOrigin {
                    lat: origin_lat,
                    lon: origin_lon,
                },
            };
            ctl.client.subscribe(STATE_TOPIC).map_err(|e| e.to_string())?;
            if use_gps {
                ctl.client.subscribe(GPS_TOPIC).map_err(|e| e.to_string())?;
            }
            ctl.client.sync(SYNC_TIMEOUT).map_err(|e| e.to_string())?;
            let listener = server.bind()?;
            listener
                .run_until(term, |req| ctl.handle(req, term))
                .map_err(|e| e.to_string())
        }
        Kind::GpsRelay {
            common,
            input,
            output,
            sigma,
            seed,
        } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(format!("--sigma must be finite and >= 0, got {sigma}"));
            }
            let client = common.connect()?;
            let output = Topic::new(client.remap().apply(&output)).map_err(|e| e.to_string())?;
            client.subscribe(&input).map_err(|e| e.to_string())?;
            client.sync(SYNC_TIMEOUT).map_err(|e| e.to_string())?;
            relay(&client, &input, &output, sigma, seed, term)
        }
        Kind::Autopilot {
            common: _,
            server,
            step_size,
            iterations,
        } => {
            let cfg = PhysicsConfig::new(step_size, iterations).map_err(|e| e.to_string())?;
            let listener = server.bind()?;
            listener
                .run_until(term, |req| {
                    let result = MissionConfig::from_request(&req)
                        .and_then(|mission| run_mission(&mission, &cfg));
                    match result {
                        Ok(outcome) => serde_json::to_value(&outcome.trace)
                            .unwrap_or_else(|e| json!({ "error": e.to_string() })),
                        Err(e) => json!({ "error": e.to_string() }),
                    }
                })
                .map_err(|e| e.to_string())
        }
        Kind::Sleep { common, children } => {
            let exe = std::env::current_exe().map_err(|e| e.to_string())?;
            let mut kids = Vec::new();
            for _ in 0..children {
                let child = std::process::Command::new(&exe)
                    .arg("sleep")
                    .args(common.tag.iter().flat_map(|t| ["--tag", t.as_str()]))
                    .spawn()
                    .map_err(|e| format!("fork sleeper: {e}"))?;
                kids.push(child);
            }
            idle_until(term);
            for mut k in kids {
                let _ = k.wait();
            }
            Ok(())
        }
        Kind::TrapTerm { .. } => {
            // the flag is set by SIGTERM but deliberately never checked
            loop {
                thread::sleep(Duration::from_secs(1));
            }
        }
        Kind::Crash { after_ms, code, .. } => {
            thread::sleep(Duration::from_millis(after_ms));
            eprintln!("crashing on purpose with status {code}");
            std::process::exit(code);
        }
        Kind::StopLog { log, name, .. } => {
            idle_until(term);
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log)
                .map_err(|e| format!("{}: {e}", log.display()))?;
            writeln!(file, "{name}").map_err(|e| e.to_string())
        }
        Kind::Echo {
            server, delay_ms, ..
        } => {
            let listener = server.bind()?;
            listener
                .run_until(term, |req| {
                    thread::sleep(Duration::from_millis(delay_ms));
                    req
                })
                .map_err(|e| e.to_string())
        }
        Kind::Probe { connect, out, .. } => {
            let deadline = Instant::now() + Duration::from_secs(10);
            let reply = loop {
                match request_reply(connect, &json!({"probe": std::process::id()}), Duration::from_secs(2)) {
                    Ok(r) => break r,
                    Err(e) if Instant::now() > deadline => return Err(format!("probe {connect}: {e}")),
                    Err(_) => thread::sleep(Duration::from_millis(20)),
                }
            };
            std::fs::write(&out, reply.to_string()).map_err(|e| e.to_string())?;
            idle_until(term);
            Ok(())
        }
    }
}

fn number(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

fn state_payload(s: &RoverState, step: u64) -> Value {
    json!({"x": number(s.x), "y": number(s.y), "theta": number(s.theta), "t": number(s.t), "step": step})
}

fn gps_payload(s: &RoverState, origin: &GeoOrigin, step: u64) -> Value {
    let (lat, lon) = origin.to_geo(s.x, s.y);
    json!({"lat": number(lat), "lon": number(lon), "alt": 0.0, "step": step})
}

fn step_of(payload: &Value) -> Option<u64> {
    payload.get("step")?.as_u64()
}

fn rover_plant(client: &BrokerClient, cfg: PhysicsConfig, origin: GeoOrigin, term: &AtomicBool) -> Result<(), String> {
    client.subscribe(CMD_TOPIC).map_err(|e| e.to_string())?;
    client.sync(SYNC_TIMEOUT).map_err(|e| e.to_string())?;
    let mut state = RoverState::default();
    let mut step: u64 = 0;
    let publish = |state: &RoverState, step: u64| -> Result<(), String> {
        client
            .publish(STATE_TOPIC, state_payload(state, step))
            .map_err(|e| e.to_string())?;
        client
            .publish(GPS_TOPIC, gps_payload(state, &origin, step))
            .map_err(|e| e.to_string())?;
        Ok(())
    };
    publish(&state, step)?;
    let mut last = Instant::now();
    while !term.load(Ordering::SeqCst) {
        let msg = match client.recv_timeout(POLL) {
            Ok(m) => m,
            Err(_) if term.load(Ordering::SeqCst) => break,
            Err(e) => return Err(format!("broker: {e}")),
        };
        if let Some(msg) = msg {
            let payload = &msg.envelope.payload;
            if msg.envelope.topic.as_str() == CMD_TOPIC && step_of(payload) == Some(step) {
                let cmd: DriveCommand = serde_json::from_value(payload.clone())
                    .map_err(|e| format!("bad cmd payload: {e}"))?;
                state = rover_step(&state, cmd, &cfg).map_err(|e| e.to_string())?;
                step += 1;
                // avoid drift from repeated addition
                state.t = step as f64 * cfg.step_size;
                publish(&state, step)?;
                last = Instant::now();
                continue;
            }
        }
        if last.elapsed() >= REPUBLISH {
            publish(&state, step)?;
            last = Instant::now();
        }
    }
    Ok(())
}

fn relay(client: &BrokerClient, input: &str, output: &Topic, sigma: f64, seed: u64, term: &AtomicBool) -> Result<(), String> {
    let mut rng = NoiseRng::seed_from(seed);
    // duplicates of a fix get the noise drawn the first time
    let mut cache: BTreeMap<u64, Value> = BTreeMap::new();
    while !term.load(Ordering::SeqCst) {
        let msg = match client.recv_timeout(POLL) {
            Ok(Some(m)) => m,
            Ok(None) => continue,
            Err(_) if term.load(Ordering::SeqCst) => break,
            Err(e) => return Err(format!("broker: {e}")),
        };
        if msg.envelope.topic.as_str() != input {
            continue;
        }
        let step = step_of(&msg.envelope.payload);
        let mut out = match step.and_then(|s| cache.get(&s)) {
            Some(payload) => {
                let mut env = msg.envelope.clone();
                env.payload = payload.clone();
                env
            }
            None => match gps_relay(&msg.envelope, output, sigma, &mut rng) {
                Ok(env) => env,
                Err(e) => {
                    eprintln!("dropping fix: {e}");
                    continue;
                }
            },
        };
        out.topic = output.clone();
        if let Some(s) = step {
            cache.insert(s, out.payload.clone());
            while cache.len() > 256 {
                cache.pop_first();
            }
        }
        client.publish_envelope(&out).map_err(|e| e.to_string())?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Mission {
    speed: f64,
    /// Upper bound on simulated seconds; the run otherwise ends after one circuit.
    duration: Option<f64>,
}

struct Controller {
    client: BrokerClient,
    side_length: f64,
    heading_tol: f64,
    use_gps: bool,
    origin: GeoOrigin,
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct StateMsg {
    x: f64,
    y: f64,
    theta: f64,
    t: f64,
}

impl Controller {
    fn handle(&self, req: Value, term: &AtomicBool) -> Value {
        let mission: Mission = match serde_json::from_value(req) {
            Ok(m) => m,
            Err(e) => return json!({ "error": format!("bad mission: {e}") }),
        };
        if !(mission.speed.is_finite() && mission.speed > 0.0) {
            return json!({ "error": "speed must be positive" });
        }
        match self.fly(&mission, term) {
            Ok(trace) => serde_json::to_value(&trace).unwrap_or_else(|e| json!({ "error": e.to_string() })),
            Err(e) => json!({ "error": e }),
        }
    }

    fn fly(&self, mission: &Mission, term: &AtomicBool) -> Result<Trace, String> {
        let params = FsaParams {
            side_length: self.side_length,
            heading_tol: self.heading_tol,
            speed: mission.speed,
        };
        let mut trace = Trace::with_signals(["x", "y", "theta", "v", "phi"]);
        let mut states: BTreeMap<u64, StateMsg> = BTreeMap::new();
        let mut fixes: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        let mut next: Option<u64> = None;
        let mut fsa: Option<FsaState> = None;
        let mut t0 = 0.0;
        let mut last_cmd: Option<(u64, Value)> = None;
        let mut heard = Instant::now();

        loop {
            if term.load(Ordering::SeqCst) {
                return Err("terminated".into());
            }
            let Some(msg) = self.client.recv_timeout(POLL).map_err(|e| e.to_string())? else {
                if heard.elapsed() > PLANT_SILENCE {
                    return Err(format!("no plant state for {PLANT_SILENCE:?}"));
                }
                continue;
            };
            heard = Instant::now();
            let payload = &msg.envelope.payload;
            let Some(step) = step_of(payload) else { continue };
            if next.is_some_and(|n| step < n) {
                // plant missed our command; repeat it
                if let Some((s, cmd)) = &last_cmd {
                    if *s == step {
                        self.client.publish(CMD_TOPIC, cmd.clone()).map_err(|e| e.to_string())?;
                    }
                }
                continue;
            }
            match msg.envelope.topic.as_str() {
                STATE_TOPIC => {
                    let s: StateMsg = serde_json::from_value(payload.clone())
                        .map_err(|e| format!("bad state payload: {e}"))?;
                    states.insert(step, s);
                }
                GPS_TOPIC => {
                    let lat = payload.get("lat").and_then(Value::as_f64);
                    let lon = payload.get("lon").and_then(Value::as_f64);
                    if let (Some(lat), Some(lon)) = (lat, lon) {
                        fixes.insert(step, (lat, lon));
                    }
                }
                _ => continue,
            }

            let k = match next {
                Some(k) => k,
                None => match states.keys().next() {
                    Some(&k) => k,
                    None => continue,
                },
            };
            let Some(&s) = states.get(&k) else { continue };
            let mut obs = RoverState {
                x: s.x,
                y: s.y,
                theta: s.theta,
                t: s.t,
                ..Default::default()
            };
            if self.use_gps {
                let Some(&(lat, lon)) = fixes.get(&k) else { continue };
                (obs.x, obs.y) = self.origin.to_local(lat, lon);
            }
            let fsa_now = *fsa.get_or_insert_with(|| {
                t0 = s.t;
                FsaState::start(&obs)
            });
            let (fsa_next, cmd) = fsa_step(&fsa_now, &obs, &params);
            let t = s.t - t0;
            trace.push("x", t, s.x);
            trace.push("y", t, s.y);
            trace.push("theta", t, s.theta);
            trace.push("v", t, cmd.v);
            trace.push("phi", t, cmd.phi);
            fsa = Some(fsa_next);

            let finished =
                fsa_next.completed_legs >= 4 || mission.duration.is_some_and(|d| t >= d - 1e-9);
            if finished {
                return Ok(trace);
            }
            let cmd_payload = json!({"v": number(cmd.v), "phi": number(cmd.phi), "step": k});
            self.client
                .publish(CMD_TOPIC, cmd_payload.clone())
                .map_err(|e| e.to_string())?;
            last_cmd = Some((k, cmd_payload));
            next = Some(k + 1);
            states.retain(|&s, _| s > k);
            fixes.retain(|&s, _| s > k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind_is_usage_error() {
        assert_eq!(main_from_args(["cosim-component", "warp-drive"]), 2);
        assert_eq!(main_from_args(["cosim-component"]), 2);
    }

    #[test]
    fn bad_remap_fails() {
        let common = Common {
            broker: None,
            remap: vec!["a=b".into(), "b=c".into()],
            tag: None,
        };
        assert!(common.remap_table().is_err());
    }
}
