use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use super::TransportError;

/// A `/`-separated topic name; each segment is `[A-Za-z0-9_]+`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Topic(String);

impl Topic {
    pub fn new(name: impl Into<String>) -> Result<Self, TransportError> {
        let name = name.into();
        if Self::is_valid(&name) {
            Ok(Topic(name))
        } else {
            Err(TransportError::InvalidTopic(name))
        }
    }

    pub fn is_valid(name: &str) -> bool {
        !name.is_empty()
            && name.split('/').all(|seg| {
                !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
            })
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Topic {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for Topic {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Topic {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Topic::new(s).map_err(serde::de::Error::custom)
    }
}

/// One published message.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageEnvelope {
    pub topic: Topic,
    pub seq: u64,
    pub stamp_ns: u64,
    pub payload: Value,
}

impl MessageEnvelope {
    pub fn new(topic: Topic, seq: u64, stamp_ns: u64, payload: Value) -> Self {
        MessageEnvelope {
            topic,
            seq,
            stamp_ns,
            payload,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topic_validation() {
        for ok in ["t", "gps", "gps_raw", "rover/state", "a/b/c_1"] {
            assert!(Topic::new(ok).is_ok(), "{ok}");
        }
        for bad in ["", "/", "a/", "/a", "a//b", "a b", "gps-raw", "ü"] {
            assert!(Topic::new(bad).is_err(), "{bad:?}");
        }
    }
}
