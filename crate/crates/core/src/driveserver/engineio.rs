//! Engine.IO protocol 3 packets and long-polling payloads, plus the
//! Socket.IO event layer carried inside message packets.
//!
//! Packet types: `0` open, `1` close, `2` ping, `3` pong, `4` message,
//! `5` upgrade, `6` noop. A Socket.IO event is a message whose body starts
//! with `2`, so `42["name",{...}]` on the wire.

use serde_json::Value;

pub const OPEN: char = '0';
pub const CLOSE: char = '1';
pub const PING: char = '2';
pub const PONG: char = '3';
pub const MESSAGE: char = '4';
pub const UPGRADE: char = '5';
pub const NOOP: char = '6';

/// Socket.IO connect packet for the default namespace.
pub const SIO_CONNECT: &str = "40";

pub fn open_packet(
    sid: &str,
    upgrades: &[&str],
    ping_interval_ms: u64,
    ping_timeout_ms: u64,
) -> String {
    let body = serde_json::json!({
        "sid": sid,
        "upgrades": upgrades,
        "pingInterval": ping_interval_ms,
        "pingTimeout": ping_timeout_ms,
    });
    format!("{OPEN}{body}")
}

/// Parses the JSON body of an open packet.
pub fn parse_open(packet: &str) -> Option<Value> {
    let body = packet.strip_prefix(OPEN)?;
    serde_json::from_str(body).ok()
}

/// Text payload framing: `<length>:<packet>` repeated, where the length
/// counts UTF-16 code units as the reference clients do.
pub fn encode_payload<S: AsRef<str>>(packets: &[S]) -> String {
    let mut out = String::new();
    for p in packets {
        let p = p.as_ref();
        out.push_str(&p.encode_utf16().count().to_string());
        out.push(':');
        out.push_str(p);
    }
    out
}

/// Decodes a polling payload in either the text framing or the binary
/// (XHR2) framing, where each packet is `0x00 <digits> 0xFF <packet>`.
pub fn decode_payload(body: &[u8]) -> Result<Vec<String>, String> {
    match body.first() {
        None => Ok(vec![]),
        Some(0) | Some(1) => decode_binary(body),
        _ => {
            let text = std::str::from_utf8(body).map_err(|_| "payload is not UTF-8".to_string())?;
            decode_text(text)
        }
    }
}

fn decode_text(text: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let (len, tail) = rest
            .split_once(':')
            .ok_or_else(|| format!("missing length prefix in payload at {rest:.20?}"))?;
        let len: usize = len
            .parse()
            .map_err(|_| format!("bad payload length {len:?}"))?;
        let mut units = 0;
        let mut end = tail.len();
        for (i, c) in tail.char_indices() {
            if units == len {
                end = i;
                break;
            }
            units += c.len_utf16();
        }
        if units < len || (units > len && end == tail.len()) {
            return Err(format!("payload truncated: wanted {len} units"));
        }
        if len == 0 {
            return Err("empty packet in payload".into());
        }
        out.push(tail[..end].to_string());
        rest = &tail[end..];
    }
    Ok(out)
}

fn decode_binary(mut body: &[u8]) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    while !body.is_empty() {
        let kind = body[0];
        if kind != 0 {
            return Err("binary packets are not supported".into());
        }
        let sep = body
            .iter()
            .position(|&b| b == 0xFF)
            .ok_or("missing length terminator")?;
        let mut len = 0usize;
        for &d in &body[1..sep] {
            if d > 9 {
                return Err("bad length digit".into());
            }
            len = len
                .checked_mul(10)
                .and_then(|l| l.checked_add(d as usize))
                .ok_or("length overflow")?;
        }
        let start = sep + 1;
        // Lengths count characters; walk the UTF-8 to find the byte extent.
        let s = std::str::from_utf8(&body[start..])
            .or_else(|e| std::str::from_utf8(&body[start..start + e.valid_up_to()]))
            .map_err(|_| "packet is not UTF-8".to_string())?;
        let end = s.char_indices().nth(len).map(|(i, _)| i).unwrap_or(s.len());
        if s[..end].chars().count() != len {
            return Err("payload truncated".into());
        }
        out.push(s[..end].to_string());
        body = &body[start + end..];
    }
    Ok(out)
}

/// Splits a Socket.IO event packet (`42`, optional namespace, optional ack
/// id, JSON array) into its name and first argument.
pub fn parse_event(packet: &str) -> Option<(String, Option<Value>)> {
    let mut body = packet.strip_prefix("42")?;
    if body.starts_with('/') {
        body = &body[body.find(',')? + 1..];
    }
    let body = body.trim_start_matches(|c: char| c.is_ascii_digit());
    let Value::Array(mut items) = serde_json::from_str(body).ok()? else {
        return None;
    };
    if items.is_empty() {
        return None;
    }
    let name = items.remove(0).as_str()?.to_string();
    let arg = if items.is_empty() {
        None
    } else {
        Some(items.remove(0))
    };
    Some((name, arg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn open_packet_shape() {
        let p = open_packet("abc", &["websocket"], 25000, 60000);
        assert!(p.starts_with('0'));
        let v = parse_open(&p).unwrap();
        assert_eq!(v["sid"], "abc");
        assert_eq!(v["upgrades"][0], "websocket");
        assert_eq!(v["pingInterval"], 25000);
    }

    #[test]
    fn text_payload() {
        assert_eq!(encode_payload(&["2", "40"]), "1:22:40");
        assert_eq!(decode_payload(b"1:22:40").unwrap(), vec!["2", "40"]);
        assert_eq!(encode_payload(&["4é"]), "2:4é");
        assert!(decode_payload(b"5:42").is_err());
        assert!(decode_payload(b"x:2").is_err());
    }

    #[test]
    fn binary_payload() {
        let body = [0u8, 1, 0xFF, b'2', 0, 2, 0xFF, b'4', b'0'];
        assert_eq!(decode_payload(&body).unwrap(), vec!["2", "40"]);
    }

    #[test]
    fn events() {
        let (n, a) = parse_event(r#"42["telemetry",{"speed":"1"}]"#).unwrap();
        assert_eq!(n, "telemetry");
        assert_eq!(a.unwrap()["speed"], "1");
        let (n, a) = parse_event(r#"42/drive,7["manual"]"#).unwrap();
        assert_eq!(n, "manual");
        assert!(a.is_none());
        assert!(parse_event("40").is_none());
        assert!(parse_event("42{}").is_none());
    }

    proptest! {
        #[test]
        fn payload_round_trip(packets in proptest::collection::vec("[0-6][a-zA-Z0-9:é😀\\[\\]{}\"]{0,20}", 0..6)) {
            let encoded = encode_payload(&packets);
            prop_assert_eq!(decode_payload(encoded.as_bytes()).unwrap(), packets);
        }
    }
}
