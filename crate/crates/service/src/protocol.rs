//! Line-delimited JSON protocol of `serve`.
//!
//! Requests, one JSON object per line:
//!
//! ```text
//! {"op":"subscribe"}
//! {"op":"unsubscribe"}
//! {"op":"snapshot"}
//! {"op":"command","schema":1,"client":"ui-1","seq":7,"event":{"kind":"SetTarget","sop":[0,0,1]}}
//! ```
//!
//! Replies carry an `ok` field. After `subscribe`, frame lines (LoopFrame
//! JSON, no `ok` field) are interleaved with replies on the same connection.

use std::collections::HashMap;

use polswitch_core::control::{Event, LoopConfig, LoopFrame, SCHEMA};
use polswitch_core::pcm::CalibrationParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandMessage {
    pub schema: u32,
    pub client: String,
    pub seq: u64,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Subscribe,
    Unsubscribe,
    Snapshot,
    Command(CommandMessage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Reply {
    pub fn ok(seq: Option<u64>) -> Self {
        Self { ok: true, seq, code: None, message: None }
    }

    pub fn error(code: &str, message: impl Into<String>, seq: Option<u64>) -> Self {
        Self {
            ok: false,
            seq,
            code: Some(code.into()),
            message: Some(message.into()),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

/// Reply to `snapshot`: the running config and the controller calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub ok: bool,
    pub schema: u32,
    pub config: LoopConfig,
    pub calibration: Vec<CalibrationParams>,
    pub tick: u64,
    pub last_frame: Option<LoopFrame>,
}

pub fn parse_request(line: &str) -> Result<Request, Reply> {
    let v: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Reply::error("bad_json", e.to_string(), None))?;
    let op = v.get("op").and_then(|o| o.as_str()).unwrap_or_default();
    match op {
        "subscribe" => Ok(Request::Subscribe),
        "unsubscribe" => Ok(Request::Unsubscribe),
        "snapshot" => Ok(Request::Snapshot),
        "command" => {
            let seq = v.get("seq").and_then(|s| s.as_u64());
            let schema = v.get("schema").and_then(|s| s.as_u64());
            if schema != Some(SCHEMA as u64) {
                return Err(Reply::error(
                    "bad_schema",
                    format!("expected schema {SCHEMA}, got {}", v.get("schema").unwrap_or(&serde_json::Value::Null)),
                    seq,
                ));
            }
            let mut body = v.clone();
            if let Some(o) = body.as_object_mut() {
                o.remove("op");
            }
            let msg: CommandMessage = serde_json::from_value(body)
                .map_err(|e| Reply::error("invalid_command", e.to_string(), seq))?;
            msg.event
                .validate()
                .map_err(|e| Reply::error("invalid_event", e.to_string(), seq))?;
            Ok(Request::Command(msg))
        }
        other => Err(Reply::error("unknown_op", format!("unknown op {other:?}"), None)),
    }
}

/// Per-client strictly increasing sequence numbers.
#[derive(Debug, Default)]
pub struct SeqTracker {
    last: HashMap<String, u64>,
}

impl SeqTracker {
    pub fn accept(&mut self, client: &str, seq: u64) -> bool {
        match self.last.get(client) {
            Some(&prev) if seq <= prev => false,
            _ => {
                self.last.insert(client.to_string(), seq);
                true
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use polswitch_core::Sop;

    #[test]
    fn parses_command() {
        let line = r#"{"op":"command","schema":1,"client":"a","seq":3,"event":{"kind":"SetTarget","sop":[0,0,1]}}"#;
        let Request::Command(m) = parse_request(line).unwrap() else { panic!() };
        assert_eq!(m.seq, 3);
        assert_eq!(m.event, Event::SetTarget { sop: Sop::R });
    }

    #[test]
    fn error_codes() {
        let code = |l: &str| parse_request(l).unwrap_err().code.unwrap();
        assert_eq!(code("{"), "bad_json");
        assert_eq!(code(r#"{"op":"dance"}"#), "unknown_op");
        assert_eq!(code(r#"{"op":"command","schema":2,"client":"a","seq":1,"event":{"kind":"Pause"}}"#), "bad_schema");
        assert_eq!(code(r#"{"op":"command","schema":1,"client":"a","seq":1,"event":{"kind":"Warp"}}"#), "invalid_command");
        assert_eq!(code(r#"{"op":"command","schema":1,"client":"a","seq":1,"event":{"kind":"SetDrift","sigma":-1}}"#), "invalid_event");
        let r = parse_request(r#"{"op":"command","schema":1,"client":"a","seq":9,"event":{"kind":"Warp"}}"#).unwrap_err();
        assert_eq!(r.seq, Some(9));
    }

    #[test]
    fn sequence_rules() {
        let mut t = SeqTracker::default();
        assert!(t.accept("a", 1));
        assert!(t.accept("a", 2));
        assert!(!t.accept("a", 2));
        assert!(!t.accept("a", 1));
        assert!(t.accept("b", 1));
        assert!(t.accept("a", 10));
    }

    #[test]
    fn reply_shape() {
        assert_eq!(Reply::ok(Some(4)).to_line(), r#"{"ok":true,"seq":4}"#);
        let e = Reply::error("stale_seq", "seq 3 <= 4", Some(3)).to_line();
        let back: Reply = serde_json::from_str(&e).unwrap();
        assert_eq!(back.code.as_deref(), Some("stale_seq"));
    }
}
