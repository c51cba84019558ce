use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn cosim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cosim"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(args: &[&str]) -> Output {
    cosim().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    let help = String::from_utf8(run(&["--help"]).stdout).unwrap();
    assert!(!help.contains("\n  component"), "hidden subcommand leaked: {help}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["run"])), 1);
    assert_eq!(code(&run(&["run", "x.toml"])), 1);
}

#[test]
fn list_names_every_kind() {
    let out = run(&["list"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for kind in ["rover-plant", "fsa-controller", "gps-relay", "autopilot"] {
        assert!(text.contains(kind), "{kind} missing");
    }
    let out = run(&["list", "--json"]);
    let kinds: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(kinds.as_array().unwrap().iter().any(|k| k["name"] == "autopilot"));
}

#[test]
fn run_writes_json_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("rover.json");
    let out = run(&["run", scenarios().join("rover.toml").to_str().unwrap(), "-o", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trace: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let signals = trace["signals"].as_object().unwrap();
    let mut names: Vec<&String> = signals.keys().collect();
    names.sort();
    assert_eq!(names, ["theta", "x", "y"]);
    let last = |name: &str| signals[name].as_array().unwrap().last().unwrap()[1].as_f64().unwrap();
    assert!(last("x").hypot(last("y")) < 1.0, "circuit did not close");
}

#[test]
fn run_csv_has_time_column_and_seed_override_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("rover.csv");
    let out = run(&[
        "run",
        scenarios().join("rover_gps.toml").to_str().unwrap(),
        "-o",
        out_path.to_str().unwrap(),
        "--csv",
        "--seed",
        "11",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(&out_path).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), ["t", "x", "y", "theta"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert!(rows.len() > 1000, "{}", rows.len());
    assert_eq!(&rows[0][0], "0");
}

#[test]
fn missing_and_invalid_files_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("o.json");
    let out = run(&["run", "/nonexistent/scenario.toml", "-o", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);

    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(scenarios().join("rover.toml"))
        .unwrap()
        .replace("kind = \"fsa-controller\"", "kind = \"warp-drive\"");
    std::fs::write(&bad, text).unwrap();
    let out = run(&["run", bad.to_str().unwrap(), "-o", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("components[1].kind"), "{}", stderr(&out));
    assert!(!out_path.exists());
}

#[test]
fn unreachable_engine_exits_two_and_names_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("c.toml");
    let text = std::fs::read_to_string(scenarios().join("rover.toml"))
        .unwrap()
        .replace("backend = \"process\"", "backend = \"container\"");
    std::fs::write(&scenario, text).unwrap();
    let out = cosim()
        .args(["run", scenario.to_str().unwrap(), "-o", dir.path().join("o.json").to_str().unwrap()])
        .env("DOCKER_HOST", "unix:///nonexistent/engine.sock")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/nonexistent/engine.sock"), "{}", stderr(&out));
}

const SMALL_CAMPAIGN: &str = r#"
schema = 1
integer = ["iters"]

[space]
iters = [1, 4]
alt = [-5, 20]

[test]
requirement = "always alt > 0.0"
iterations = 6
seed = 5
parallelism = 2
fidelity = ["iters"]

[scenario]
schema = 1
duration = 2.0

[[scenario.components]]
kind = "autopilot"
config = { iterations = "{iters}" }

[scenario.request]
mission = [{ lat = 0.0, lon = 0.0, alt = "{alt}" }]
"#;

#[test]
fn falsify_writes_report_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let campaign = dir.path().join("campaign.toml");
    std::fs::write(&campaign, SMALL_CAMPAIGN).unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let traces = dir.path().join("traces");
    let out = run(&[
        "falsify",
        campaign.to_str().unwrap(),
        "-o",
        a.to_str().unwrap(),
        "--traces",
        traces.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("FALSIFIED"), "{stdout}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(report["evaluations"].as_array().unwrap().len(), 6);
    assert_eq!(std::fs::read_dir(&traces).unwrap().count(), 6);

    let c = dir.path().join("c.json");
    let out = run(&["falsify", campaign.to_str().unwrap(), "-o", b.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let out = run(&["falsify", campaign.to_str().unwrap(), "-o", c.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(&b).unwrap(), std::fs::read(&c).unwrap());
    let without: Value = serde_json::from_slice(&std::fs::read(&b).unwrap()).unwrap();
    assert_eq!(without["best"], report["best"]);
}

#[test]
fn falsify_with_every_evaluation_failing_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let campaign = dir.path().join("campaign.toml");
    std::fs::write(&campaign, SMALL_CAMPAIGN.replace("config = { iterations = \"{iters}\" }", "config = { iterations = \"{iters}\", step_size = -1.0 }")).unwrap();
    let out = run(&["falsify", campaign.to_str().unwrap(), "-o", dir.path().join("o.json").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("all 6 evaluations failed"), "{}", stderr(&out));
}
