use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::envelope::Topic;
use super::TransportError;

/// Source topic -> destination topic renames applied to a publisher's
/// outgoing messages. Always injective and chain-free, so applying it is
/// idempotent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
pub struct RemapTable {
    entries: BTreeMap<String, String>,
}

impl RemapTable {
    pub fn new<I, S, D>(pairs: I) -> Result<Self, TransportError>
    where
        I: IntoIterator<Item = (S, D)>,
        S: Into<String>,
        D: Into<String>,
    {
        let mut entries = BTreeMap::new();
        for (src, dst) in pairs {
            let (src, dst) = (src.into(), dst.into());
            Topic::new(src.as_str())?;
            Topic::new(dst.as_str())?;
            if src == dst {
                continue;
            }
            if entries.insert(src.clone(), dst).is_some() {
                return Err(TransportError::InvalidRemap(format!(
                    "source {src:?} mapped twice"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for (src, dst) in &entries {
            if !seen.insert(dst) {
                return Err(TransportError::InvalidRemap(format!(
                    "two sources map to {dst:?}"
                )));
            }
            if entries.contains_key(dst) {
                return Err(TransportError::InvalidRemap(format!(
                    "chain {src:?} -> {dst:?} -> {:?}",
                    entries[dst]
                )));
            }
        }
        Ok(RemapTable { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(s, d)| (s.as_str(), d.as_str()))
    }

    pub fn apply<'a>(&'a self, topic: &'a str) -> &'a str {
        self.entries.get(topic).map(String::as_str).unwrap_or(topic)
    }

    /// `src=dst` arguments, as passed to component processes.
    pub fn to_args(&self) -> Vec<String> {
        self.iter().map(|(s, d)| format!("{s}={d}")).collect()
    }
}

impl TryFrom<BTreeMap<String, String>> for RemapTable {
    type Error = TransportError;

    fn try_from(map: BTreeMap<String, String>) -> Result<Self, Self::Error> {
        RemapTable::new(map)
    }
}

impl From<RemapTable> for BTreeMap<String, String> {
    fn from(table: RemapTable) -> Self {
        table.entries
    }
}

impl FromStr for RemapTable {
    type Err = TransportError;

    /// Comma-separated `src=dst` pairs.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let pairs = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.split_once('=')
                    .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                    .ok_or_else(|| TransportError::InvalidRemap(format!("expected src=dst, got {p:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        RemapTable::new(pairs)
    }
}

pub fn apply_remap<'a>(topic: &'a str, table: &'a RemapTable) -> &'a str {
    table.apply(topic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mapped_and_unmapped_topics() {
        let table = RemapTable::new([("gps", "gps_raw")]).unwrap();
        assert_eq!(apply_remap("gps", &table), "gps_raw");
        assert_eq!(apply_remap("imu", &table), "imu");
        let empty = RemapTable::default();
        assert_eq!(apply_remap("gps", &empty), "gps");
    }

    #[test]
    fn rejects_non_injective_and_chains() {
        assert!(RemapTable::new([("a", "c"), ("b", "c")]).is_err());
        assert!(RemapTable::new([("a", "b"), ("b", "c")]).is_err());
        assert!(RemapTable::new([("a", "bad topic")]).is_err());
        // a swap is a chain too
        assert!(RemapTable::new([("a", "b"), ("b", "a")]).is_err());
    }

    #[test]
    fn parses_cli_form() {
        let table: RemapTable = "gps=gps_raw, state=rover/state".parse().unwrap();
        assert_eq!(table.apply("state"), "rover/state");
        assert_eq!(table.to_args(), vec!["gps=gps_raw", "state=rover/state"]);
        assert!("gps".parse::<RemapTable>().is_err());
    }

    proptest! {
        #[test]
        fn idempotent(pairs in prop::collection::btree_map("[a-e]{1,2}", "[f-j]{1,2}", 0..6),
                      probe in "[a-j]{1,2}") {
            // destinations drawn from a disjoint alphabet, so no chains
            if let Ok(table) = RemapTable::new(pairs) {
                let once = table.apply(&probe).to_string();
                prop_assert_eq!(table.apply(&once), once.as_str());
            }
        }
    }
}
