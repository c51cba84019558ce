//! `cosim`: run scenarios and falsification campaigns from the shell.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! environment failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cosim::components::builtin::KINDS;
use cosim::components::runtime::main_from_args;
use cosim::falsify::{lowest_fidelity_falsifier, run_test, FalsifyError, Sample};
use cosim::process::set_component_runner;
use cosim::scenario::{run_scenario, CampaignConfig, ConfigError, ScenarioConfig};
use cosim::Trace;

#[derive(Parser)]
#[command(name = "cosim", version, about = "Component-based co-simulation runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its trace.
    Run {
        scenario: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Write CSV (t plus one column per signal) instead of JSON.
        #[arg(long)]
        csv: bool,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a falsification campaign and write the report.
    Falsify {
        campaign: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Override the campaign seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write each evaluation's trace into this directory.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// List built-in component kinds and their config keys.
    List {
        #[arg(long)]
        json: bool,
    },
    /// Run a built-in component (used by the process backend).
    #[command(hide = true)]
    Component {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<OsString>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(exe) = std::env::current_exe() {
        set_component_runner(exe, vec!["component".into()]);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            csv,
            seed,
        } => cmd_run(&scenario, &out, csv, seed),
        Command::Falsify {
            campaign,
            out,
            seed,
            traces,
        } => cmd_falsify(&campaign, &out, seed, traces),
        Command::List { json } => cmd_list(json),
        Command::Component { args } => {
            let argv = std::iter::once(OsString::from("cosim component")).chain(args);
            return ExitCode::from(main_from_args(argv).clamp(0, 255) as u8);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn with_path(path: &Path, e: ConfigError) -> Failure {
    match e {
        e @ ConfigError::Io { .. } => Failure::Config(e.to_string()),
        e => Failure::Config(format!("{}: {e}", path.display())),
    }
}

fn cmd_run(path: &Path, out: &Path, csv: bool, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = ScenarioConfig::load(path).map_err(|e| with_path(path, e))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.validate().map_err(|e| with_path(path, e))?;
    }
    let trace = run_scenario(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    let written = if csv { write_csv(out, &trace) } else { write_json(out, &trace) };
    written.map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    println!("wrote {} samples of {} signals to {}", trace.len(), trace.signals.len(), out.display());
    Ok(())
}

fn write_json(out: &Path, trace: &Trace) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(trace)?;
    text.push('\n');
    std::fs::write(out, text)
}

fn write_csv(out: &Path, trace: &Trace) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(std::iter::once("t").chain(trace.names()))?;
    for row in trace.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()
}

fn cmd_falsify(path: &Path, out: &Path, seed: Option<u64>, traces: Option<PathBuf>) -> Result<(), Failure> {
    let mut campaign = CampaignConfig::load(path).map_err(|e| with_path(path, e))?;
    if let Some(seed) = seed {
        campaign.test.seed = seed;
    }
    let space = campaign.sample_space().map_err(|e| with_path(path, e))?;
    let mut options = campaign.options();
    if let Some(dir) = traces {
        options = options.with_trace_dir(dir);
    }
    let model = |sample: &Sample| -> Result<Trace, String> {
        let scenario = campaign.instantiate(sample).map_err(|e| e.to_string())?;
        run_scenario(&scenario).map_err(|e| e.to_string())
    };
    let result = match run_test(&model, &campaign.test.requirement, &space, &options) {
        Ok(r) => r,
        Err(e @ (FalsifyError::InvalidOptions(_) | FalsifyError::InvalidSpace(_))) => {
            return Err(Failure::Config(e.to_string()))
        }
        Err(e) => return Err(Failure::Runtime(e.to_string())),
    };
    std::fs::write(out, result.to_json()).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;

    let best = result.best_evaluation();
    let verdict = if result.falsified { "FALSIFIED" } else { "NOT FALSIFIED" };
    println!(
        "{verdict}: best robustness {} at evaluation {} of {}",
        best.robustness,
        result.best,
        result.evaluations.len()
    );
    if result.failures() > 0 {
        println!("{} evaluations failed (scored +inf)", result.failures());
    }
    if result.falsified && !campaign.test.fidelity.is_empty() {
        if let Ok(Some(sample)) = lowest_fidelity_falsifier(&result, &campaign.test.fidelity) {
            println!("lowest-fidelity falsifier: {}", serde_json::to_string(&sample).unwrap_or_default());
        }
    }
    Ok(())
}

fn cmd_list(json: bool) -> Result<(), Failure> {
    let mut stdout = std::io::stdout().lock();
    if json {
        let text = serde_json::to_string_pretty(KINDS).expect("serializable");
        let _ = writeln!(stdout, "{text}");
        return Ok(());
    }
    for kind in KINDS {
        let role = if kind.firmware { " (request/reply)" } else { "" };
        let _ = writeln!(stdout, "{}{role}\n  {}", kind.name, kind.description);
        for p in kind.params {
            let ty = serde_json::to_value(p.ty).unwrap_or_default();
            let _ = writeln!(
                stdout,
                "    {:<12} {:<8} default {:<6} {}",
                p.name,
                ty.as_str().unwrap_or("?"),
                p.default,
                p.description
            );
        }
    }
    Ok(())
}
