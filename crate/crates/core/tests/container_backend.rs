mod common;
#[path = "common/mock_engine.rs"]
mod mock_engine;

use std::collections::BTreeMap;
use std::time::Duration;

use cosim::components::builtin::{builtin_args, BuiltinComponent};
use cosim::container::{
    AttachedComponent, ContainerBackend, ContainerComponent, Engine, EngineError, FirmwareComponent,
    FirmwareContainerNode, NetworkSpec, RunSpec, DEFAULT_COMPONENT_IMAGE,
};
use cosim::process::ProcessBackend;
use cosim::{CommunicationNode, CoreError, Node, NodeState, PortAllocator, Simulator, Trace};
use serde_json::{json, Map, Value};

use common::use_built_runner;
use mock_engine::MockEngine;

const IMAGE: &str = DEFAULT_COMPONENT_IMAGE;

fn mock() -> MockEngine {
    use_built_runner();
    MockEngine::start(&[IMAGE, "busybox:latest"])
}

fn free_port() -> u16 {
    PortAllocator::loopback().allocate().unwrap()
}

fn cfg(v: Value) -> Map<String, Value> {
    v.as_object().cloned().unwrap_or_default()
}

fn sleeper(tag: &str) -> ContainerComponent {
    ContainerComponent::builtin("sleep", vec!["--tag".into(), tag.into()])
}

#[test]
fn empty_simulation_creates_and_removes_network() {
    let mock = mock();
    let mut sim = Simulator::new(ContainerBackend::new(mock.engine()));
    let running = sim.start().unwrap();
    let id = running.id().to_string();
    assert_eq!(mock.labeled_networks(&id), 1);
    let status = running.stop();
    assert!(status.leftovers.is_empty(), "{:?}", status.leftovers);
    assert_eq!(mock.labeled_networks(&id), 0);
    let requests = mock.state.lock().unwrap().requests.clone();
    assert!(requests.iter().any(|r| r.starts_with("POST /v1.41/networks/create")));
}

#[test]
fn network_name_clash_is_retried_once() {
    let mock = mock();
    let engine = mock.engine();
    mock.state.lock().unwrap().force_conflicts = 1;
    let (id, name) = engine.create_unique_network(&BTreeMap::new()).unwrap();
    assert!(name.starts_with("cosim-") && name.len() == 14, "{name}");
    assert_eq!(engine.inspect_network(&id).unwrap()["Name"], name.as_str());

    mock.state.lock().unwrap().force_conflicts = 2;
    match engine.create_unique_network(&BTreeMap::new()) {
        Err(EngineError::Api { status: 409, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_image_is_reported_with_pull_hint() {
    let mock = mock();
    let engine = mock.engine();
    let (net, _) = engine.create_unique_network(&BTreeMap::new()).unwrap();
    let spec = RunSpec {
        image: "nowhere/absent:1".into(),
        argv: vec![],
        network: NetworkSpec::Attach(net),
        ports: vec![],
        env: vec![],
        labels: BTreeMap::new(),
    };
    let err = engine.run_container(&spec).unwrap_err();
    assert!(matches!(err, EngineError::ImageMissing { .. }));
    assert!(err.to_string().contains("docker pull nowhere/absent:1"));
}

#[test]
fn ports_resolve_and_stop_remove_is_idempotent() {
    let mock = mock();
    let engine = mock.engine();
    let (net, _) = engine.create_unique_network(&BTreeMap::new()).unwrap();
    let port = free_port();
    let spec = RunSpec {
        image: IMAGE.into(),
        argv: vec!["cosim-component".into(), "sleep".into()],
        network: NetworkSpec::Attach(net.clone()),
        ports: vec![port],
        env: vec![],
        labels: BTreeMap::new(),
    };
    let id = engine.run_container(&spec).unwrap();
    assert_eq!(engine.inspect_container(&id).unwrap()["State"]["Running"], true);
    assert_eq!(engine.resolve_host_port(&id, port).unwrap(), port);
    assert!(matches!(
        engine.resolve_host_port(&id, port.wrapping_add(1)),
        Err(EngineError::NoBinding { .. })
    ));
    engine.stop_remove(&id, 0).unwrap();
    engine.stop_remove(&id, 0).unwrap();
    assert!(engine.resolve_host_port(&id, port).unwrap_err().is_not_found());
    engine.remove_network(&net).unwrap();
    engine.remove_network(&net).unwrap();
}

#[test]
fn satellites_share_the_host_stack() {
    let mock = mock();
    let mut sim = Simulator::new(ContainerBackend::new(mock.engine()));
    let group = sim
        .add(AttachedComponent::new(sleeper("host"), vec![sleeper("sat")]))
        .unwrap();
    let running = sim.start().unwrap();
    let node = running.get(&group).unwrap();
    let engine = mock.engine();
    let host_id = node.host().id().to_string();
    let sat = engine.inspect_container(node.members()[1].id()).unwrap();
    assert_eq!(sat["HostConfig"]["NetworkMode"], format!("container:{host_id}"));
    assert_eq!(node.state(), NodeState::Running);
    let id = running.id().to_string();
    drop(node);
    running.stop();
    assert_eq!(mock.labeled_containers(&id), 0);
    assert_eq!(mock.labeled_networks(&id), 0);
}

#[test]
fn startup_failure_tears_everything_down() {
    let mock = mock();
    let mut sim = Simulator::new(ContainerBackend::new(mock.engine()));
    sim.add(sleeper("first")).unwrap();
    sim.add(ContainerComponent::new("nowhere/absent:1", ["x"]).unwrap()).unwrap();
    let err = sim.start().unwrap_err();
    match err {
        CoreError::StartupFailure { reason, .. } => assert!(reason.contains("docker pull"), "{reason}"),
        other => panic!("{other:?}"),
    }
    let s = mock.state.lock().unwrap();
    assert!(s.containers.is_empty());
    assert!(s.networks.is_empty());
}

#[test]
fn crashed_container_is_failed_with_its_last_words() {
    let mock = mock();
    let mut sim = Simulator::new(ContainerBackend::new(mock.engine()));
    let crash = sim
        .add(ContainerComponent::builtin("crash", vec!["--after-ms".into(), "50".into()]))
        .unwrap();
    let running = sim.start().unwrap();
    std::thread::sleep(Duration::from_millis(600));
    match running.get(&crash).unwrap().state() {
        NodeState::Failed(reason) => {
            assert!(reason.contains("status 3"), "{reason}");
            assert!(reason.contains("crashing on purpose"), "{reason}");
        }
        other => panic!("{other:?}"),
    }
    let status = running.stop();
    assert!(matches!(status.nodes[0].state, NodeState::Failed(_)));
}

fn container_rover(sim: &mut Simulator<ContainerBackend>) -> cosim::NodeId<FirmwareContainerNode> {
    let plant_args = builtin_args("rover-plant", &cfg(json!({"step_size": 0.01})), 0).unwrap();
    sim.add(ContainerComponent::builtin("rover-plant", plant_args)).unwrap();
    let mut ctl_args = builtin_args("fsa-controller", &Map::new(), 0).unwrap();
    ctl_args.extend(["--bind".to_string(), "0.0.0.0".to_string()]);
    let ctl = FirmwareComponent::new(ContainerComponent::builtin("fsa-controller", ctl_args), free_port()).unwrap();
    sim.add(ctl).unwrap()
}

#[test]
fn rover_on_mock_engine_matches_process_backend() {
    let mock = mock();
    let mut csim = Simulator::new(ContainerBackend::new(mock.engine()));
    let ctl = container_rover(&mut csim);
    let running = csim.start().unwrap();
    let reply = running.get(&ctl).unwrap().send(&json!({"speed": 5})).unwrap();
    let container_trace: Trace = serde_json::from_value(reply).unwrap();
    let id = running.id().to_string();
    running.stop();
    assert_eq!(mock.labeled_containers(&id), 0);

    let mut psim = Simulator::new(ProcessBackend::new());
    let BuiltinComponent::Process(plant) =
        BuiltinComponent::new("rover-plant", &cfg(json!({"step_size": 0.01})), Default::default(), 0).unwrap()
    else {
        panic!()
    };
    psim.add(plant).unwrap();
    let BuiltinComponent::Firmware(pctl) =
        BuiltinComponent::new("fsa-controller", &Map::new(), Default::default(), 0).unwrap()
    else {
        panic!()
    };
    let pctl = psim.add(pctl).unwrap();
    let prun = psim.start().unwrap();
    let process_trace: Trace = serde_json::from_value(prun.get(&pctl).unwrap().send(&json!({"speed": 5})).unwrap()).unwrap();
    assert_eq!(container_trace, process_trace);
}

#[test]
fn send_after_stop_is_channel_closed() {
    let mock = mock();
    let mut sim = Simulator::new(ContainerBackend::new(mock.engine()));
    let ctl = container_rover(&mut sim);
    let running = sim.start().unwrap();
    let node = running.get(&ctl).unwrap();
    running.stop();
    assert!(matches!(node.send(&json!({"speed": 5})), Err(cosim::NodeError::ChannelClosed)));
}

/// Real engine checks; skipped when none answers.
fn live_engine() -> Option<Engine> {
    let engine = Engine::from_env().ok()?;
    match engine.ping() {
        Ok(()) => Some(engine),
        Err(e) => {
            eprintln!("skipping: {e}");
            None
        }
    }
}

#[test]
fn live_engine_network_lifecycle() {
    let Some(engine) = live_engine() else { return };
    let mut sim = Simulator::new(ContainerBackend::new(engine.clone()));
    let running = sim.start().unwrap();
    let id = running.id().to_string();
    assert_eq!(engine.networks_with_label("cosim.sim", &id).unwrap().len(), 1);
    running.stop();
    assert!(engine.networks_with_label("cosim.sim", &id).unwrap().is_empty());
    assert!(engine.containers_with_label("cosim.sim", &id).unwrap().is_empty());
}
