#![allow(dead_code)]

use std::fs;
use std::sync::Once;

static RUNNER: Once = Once::new();

/// Points built-in components at the runner binary cargo built for us.
pub fn use_built_runner() {
    RUNNER.call_once(|| {
        cosim::process::set_component_runner(env!("CARGO_BIN_EXE_cosim-component").into(), Vec::new());
    });
}

pub fn unique_tag(prefix: &str) -> String {
    format!("{prefix}-{:032x}", rand::random::<u128>())
}

/// Live processes whose command line contains `tag`.
pub fn tagged_pids(tag: &str) -> Vec<u32> {
    let mut pids = Vec::new();
    let Ok(entries) = fs::read_dir("/proc") else {
        return pids;
    };
    for entry in entries.flatten() {
        let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let Ok(cmdline) = fs::read(format!("/proc/{pid}/cmdline")) else {
            continue;
        };
        let text = String::from_utf8_lossy(&cmdline);
        if text.split('\0').any(|arg| arg == tag) && cosim::process::procfs::process_exists(pid) {
            pids.push(pid);
        }
    }
    pids
}
