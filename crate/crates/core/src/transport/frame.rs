use std::io::{self, Read, Write};

use serde::Serialize;
use serde_json::Value;

use super::envelope::{MessageEnvelope, Topic};
use super::TransportError;

/// Largest accepted frame body (16 MiB).
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Serialize)]
struct CanonicalEnvelope<'a> {
    topic: &'a str,
    seq: u64,
    stamp_ns: u64,
    payload: &'a Value,
}

/// Canonical JSON body: keys in fixed order, no whitespace.
pub fn encode_body(envelope: &MessageEnvelope) -> Vec<u8> {
    serde_json::to_vec(&CanonicalEnvelope {
        topic: envelope.topic.as_str(),
        seq: envelope.seq,
        stamp_ns: envelope.stamp_ns,
        payload: &envelope.payload,
    })
    .expect("JSON values always serialize")
}

pub fn encode_frame(envelope: &MessageEnvelope) -> Result<Vec<u8>, TransportError> {
    let body = encode_body(envelope);
    let mut out = Vec::with_capacity(body.len() + 4);
    write_frame(&mut out, &body)?;
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<(), TransportError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(TransportError::OversizeMessage(body.len()));
    }
    let mut frame = Vec::with_capacity(body.len() + 4);
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(body);
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame body. A clean end of stream before the first length byte
/// is [`TransportError::Eof`]; anything shorter than a whole frame is
/// [`TransportError::Truncated`].
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, TransportError> {
    let mut len_buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut len_buf[filled..]) {
            Ok(0) if filled == 0 => return Err(TransportError::Eof),
            Ok(0) => return Err(TransportError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > MAX_FRAME_LEN {
        return Err(TransportError::OversizeMessage(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TransportError::Truncated,
        _ => e.into(),
    })?;
    Ok(body)
}

pub fn decode_frame<R: Read>(r: &mut R) -> Result<MessageEnvelope, TransportError> {
    let body = read_frame(r)?;
    envelope_from_body(&body)
}

pub fn envelope_from_body(body: &[u8]) -> Result<MessageEnvelope, TransportError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| TransportError::BadJson(e.to_string()))?;
    envelope_from_value(value)
}

pub(crate) fn envelope_from_value(value: Value) -> Result<MessageEnvelope, TransportError> {
    let Value::Object(mut map) = value else {
        return Err(TransportError::SchemaViolation("body is not an object".into()));
    };
    let topic = match map.remove("topic") {
        Some(Value::String(s)) => {
            Topic::new(s).map_err(|e| TransportError::SchemaViolation(e.to_string()))?
        }
        Some(_) => return Err(TransportError::SchemaViolation("topic must be a string".into())),
        None => return Err(TransportError::SchemaViolation("missing key \"topic\"".into())),
    };
    let mut take_u64 = |key: &str| match map.remove(key) {
        Some(v) => v.as_u64().ok_or_else(|| {
            TransportError::SchemaViolation(format!("{key} must be an unsigned 64-bit integer"))
        }),
        None => Err(TransportError::SchemaViolation(format!(
            "missing key {key:?}"
        ))),
    };
    let seq = take_u64("seq")?;
    let stamp_ns = take_u64("stamp_ns")?;
    let payload = map
        .remove("payload")
        .ok_or_else(|| TransportError::SchemaViolation("missing key \"payload\"".into()))?;
    if let Some(extra) = map.keys().next() {
        return Err(TransportError::SchemaViolation(format!(
            "unexpected key {extra:?}"
        )));
    }
    Ok(MessageEnvelope {
        topic,
        seq,
        stamp_ns,
        payload,
    })
}

/// The raw payload bytes of a canonical envelope body, as they travelled on
/// the wire.
pub fn payload_slice(body: &[u8]) -> Option<&[u8]> {
    const KEY: &[u8] = b",\"payload\":";
    let start = body.windows(KEY.len()).position(|w| w == KEY)? + KEY.len();
    let end = body.len().checked_sub(1)?;
    (body.get(end) == Some(&b'}') && start <= end).then(|| &body[start..end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;
    use std::io::Cursor;

    fn env(topic: &str, seq: u64, stamp_ns: u64, payload: Value) -> MessageEnvelope {
        MessageEnvelope::new(Topic::new(topic).unwrap(), seq, stamp_ns, payload)
    }

    #[test]
    fn golden_null_envelope() {
        let frame = encode_frame(&env("t", 0, 0, Value::Null)).unwrap();
        let body = br#"{"topic":"t","seq":0,"stamp_ns":0,"payload":null}"#;
        // 49 bytes by direct count
        assert_eq!(body.len(), 0x31);
        assert_eq!(&frame[..4], &[0x00, 0x00, 0x00, 0x31]);
        assert_eq!(&frame[4..], body);
        assert_eq!(frame.len(), 53);
    }

    #[test]
    fn oversize_payload_is_rejected() {
        let big = "x".repeat(17 * 1024 * 1024);
        assert!(matches!(
            encode_frame(&env("t", 0, 0, Value::String(big))),
            Err(TransportError::OversizeMessage(_))
        ));
    }

    #[test]
    fn truncated_length_prefix() {
        let mut cur = Cursor::new(vec![0u8, 0]);
        assert!(matches!(decode_frame(&mut cur), Err(TransportError::Truncated)));
    }

    #[test]
    fn truncated_body() {
        let mut frame = encode_frame(&env("t", 1, 2, json!({"a": 1}))).unwrap();
        frame.truncate(frame.len() - 3);
        assert!(matches!(
            decode_frame(&mut Cursor::new(frame)),
            Err(TransportError::Truncated)
        ));
    }

    #[test]
    fn clean_eof_at_boundary() {
        assert!(matches!(
            decode_frame(&mut Cursor::new(Vec::new())),
            Err(TransportError::Eof)
        ));
    }

    #[test]
    fn schema_and_json_errors() {
        let mut frame = Vec::new();
        write_frame(&mut frame, br#"{"topic":1}"#).unwrap();
        assert!(matches!(
            decode_frame(&mut Cursor::new(frame)),
            Err(TransportError::SchemaViolation(_))
        ));

        let mut frame = Vec::new();
        write_frame(&mut frame, br#"{"topic":"t","seq":0,"stamp_ns":0}"#).unwrap();
        assert!(matches!(
            decode_frame(&mut Cursor::new(frame)),
            Err(TransportError::SchemaViolation(_))
        ));

        let mut frame = Vec::new();
        write_frame(&mut frame, br#"{"topic":"t","seq":-1,"stamp_ns":0,"payload":1}"#).unwrap();
        assert!(matches!(
            decode_frame(&mut Cursor::new(frame)),
            Err(TransportError::SchemaViolation(_))
        ));

        let mut frame = Vec::new();
        write_frame(&mut frame, b"{not json").unwrap();
        assert!(matches!(
            decode_frame(&mut Cursor::new(frame)),
            Err(TransportError::BadJson(_))
        ));
    }

    #[test]
    fn decode_consumes_exactly_one_frame() {
        let a = env("a", 1, 10, json!([1, 2]));
        let b = env("b/c", 2, 20, json!({"k": "v"}));
        let mut stream = encode_frame(&a).unwrap();
        stream.extend(encode_frame(&b).unwrap());
        let mut cur = Cursor::new(stream);
        assert_eq!(decode_frame(&mut cur).unwrap(), a);
        assert_eq!(decode_frame(&mut cur).unwrap(), b);
        assert!(matches!(decode_frame(&mut cur), Err(TransportError::Eof)));
    }

    #[test]
    fn payload_slice_extracts_raw_bytes() {
        let body = encode_body(&env("gps", 3, 4, json!({"alt": 0.5, "lat": 1e-5})));
        assert_eq!(payload_slice(&body).unwrap(), br#"{"alt":0.5,"lat":0.00001}"#);
    }

    fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(|n| json!(n)),
            any::<u64>().prop_map(|n| json!(n)),
            (-1e300f64..1e300).prop_map(|f| json!(f)),
            "[ -~]{0,12}".prop_map(Value::String),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                prop::collection::btree_map("[a-z_]{1,6}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn round_trip(topic in "[A-Za-z0-9_]{1,5}(/[A-Za-z0-9_]{1,5}){0,2}",
                      seq in any::<u64>(), stamp in any::<u64>(), payload in arb_json()) {
            let e = env(&topic, seq, stamp, payload);
            let frame = encode_frame(&e).unwrap();
            let back = decode_frame(&mut Cursor::new(&frame)).unwrap();
            prop_assert_eq!(&back, &e);
            // re-encoding is byte-stable
            prop_assert_eq!(encode_frame(&back).unwrap(), frame);
        }
    }
}
