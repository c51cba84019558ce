//! Process table queries via /proc. Zombies count as dead.

use std::collections::HashMap;
use std::fs;

#[derive(Debug, Clone, Copy)]
struct Stat {
    pid: u32,
    state: char,
    ppid: u32,
    pgrp: u32,
}

fn parse_stat(text: &str) -> Option<Stat> {
    // comm may contain spaces and parentheses; fields resume after the last ')'
    let close = text.rfind(')')?;
    let pid = text[..text.find('(')?].trim().parse().ok()?;
    let mut rest = text[close + 1..].split_whitespace();
    let state = rest.next()?.chars().next()?;
    let ppid = rest.next()?.parse().ok()?;
    let pgrp = rest.next()?.parse().ok()?;
    Some(Stat {
        pid,
        state,
        ppid,
        pgrp,
    })
}

fn read_stat(pid: u32) -> Option<Stat> {
    parse_stat(&fs::read_to_string(format!("/proc/{pid}/stat")).ok()?)
}

fn all_stats() -> Vec<Stat> {
    let Ok(entries) = fs::read_dir("/proc") else {
        return Vec::new();
    };
    entries
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<u32>().ok())
        .filter_map(read_stat)
        .collect()
}

fn alive(stat: &Stat) -> bool {
    !matches!(stat.state, 'Z' | 'X' | 'x')
}

pub fn process_exists(pid: u32) -> bool {
    read_stat(pid).is_some_and(|s| alive(&s))
}

/// Live members of process group `pgid`.
pub fn group_members(pgid: u32) -> Vec<u32> {
    all_stats()
        .into_iter()
        .filter(|s| s.pgrp == pgid && alive(s))
        .map(|s| s.pid)
        .collect()
}

/// Live processes below `pid` in the process tree.
pub fn descendants(pid: u32) -> Vec<u32> {
    let stats = all_stats();
    let mut children: HashMap<u32, Vec<&Stat>> = HashMap::new();
    for s in &stats {
        children.entry(s.ppid).or_default().push(s);
    }
    let mut out = Vec::new();
    let mut stack = vec![pid];
    while let Some(p) = stack.pop() {
        for child in children.get(&p).into_iter().flatten() {
            if alive(child) {
                out.push(child.pid);
            }
            stack.push(child.pid);
        }
    }
    out.sort_unstable();
    out
}
