use std::io::BufRead;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::LoopError;
use crate::polarization::{RotationQ, Sop};

/// Operator steering, applied at a tick boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Event {
    SetTarget { sop: Sop },
    SetDrift { sigma: f64 },
    InjectJump { axis: [f64; 3], angle: f64 },
    Pause,
    Resume,
    Reset,
}

impl Event {
    pub fn validate(&self) -> Result<(), LoopError> {
        match self {
            Event::SetDrift { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                Err(LoopError::InvalidEvent(format!("drift sigma {sigma} must be finite and >= 0")))
            }
            Event::InjectJump { axis, angle } => {
                self.jump_rotation()?;
                if !angle.is_finite() {
                    return Err(LoopError::InvalidEvent(format!("jump angle {angle}")));
                }
                let _ = axis;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Rotation of an `InjectJump`; the identity for other kinds.
    pub fn jump_rotation(&self) -> Result<RotationQ, LoopError> {
        match self {
            Event::InjectJump { axis, angle } => {
                RotationQ::from_axis_angle(Vector3::from(*axis), *angle)
                    .map_err(|e| LoopError::InvalidEvent(e.to_string()))
            }
            _ => Ok(RotationQ::IDENTITY),
        }
    }

    /// Target changes, jumps and resets restart the settle clock.
    pub fn is_disturbance(&self) -> bool {
        matches!(
            self,
            Event::SetTarget { .. } | Event::InjectJump { .. } | Event::Reset
        )
    }
}

/// An event due at a given tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedEvent {
    pub tick: u64,
    pub event: Event,
}

/// Events ordered by tick; ties keep file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventScript {
    events: Vec<ScriptedEvent>,
}

impl EventScript {
    pub fn new(mut events: Vec<ScriptedEvent>) -> Result<Self, LoopError> {
        for e in &events {
            e.event.validate()?;
        }
        events.sort_by_key(|e| e.tick);
        Ok(Self { events })
    }

    /// One `{"tick": N, "event": {...}}` object per line; blank lines and
    /// lines starting with `#` are skipped.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, LoopError> {
        let mut events = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| LoopError::Script(e.to_string()))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let ev: ScriptedEvent = serde_json::from_str(trimmed)
                .map_err(|e| LoopError::Script(format!("line {}: {e}", i + 1)))?;
            events.push(ev);
        }
        Self::new(events)
    }

    pub fn events(&self) -> &[ScriptedEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events due at exactly `tick`.
    pub fn at(&self, tick: u64) -> impl Iterator<Item = &Event> {
        let start = self.events.partition_point(|e| e.tick < tick);
        self.events[start..]
            .iter()
            .take_while(move |e| e.tick == tick)
            .map(|e| &e.event)
    }

    /// A target square wave alternating between `a` and `b` every
    /// `half_period` ticks, starting with `b` at `start`.
    pub fn square_wave(a: Sop, b: Sop, start: u64, half_period: u64, until: u64) -> Self {
        let mut events = Vec::new();
        let mut tick = start;
        let mut high = true;
        while tick < until {
            let sop = if high { b } else { a };
            events.push(ScriptedEvent {
                tick,
                event: Event::SetTarget { sop },
            });
            high = !high;
            tick += half_period.max(1);
        }
        Self { events }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let e = Event::SetTarget { sop: Sop::R };
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"{"kind":"SetTarget","sop":[0.0,0.0,1.0]}"#);
        let p: Event = serde_json::from_str(r#"{"kind":"Pause"}"#).unwrap();
        assert_eq!(p, Event::Pause);
        assert!(serde_json::from_str::<Event>(r#"{"kind":"Explode"}"#).is_err());
        assert!(serde_json::from_str::<Event>(r#"{"kind":"SetTarget","sop":[1,1,0]}"#).is_err());
    }

    #[test]
    fn validation() {
        assert!(Event::SetDrift { sigma: -1.0 }.validate().is_err());
        assert!(Event::SetDrift { sigma: 0.01 }.validate().is_ok());
        assert!(Event::InjectJump { axis: [1.0, 1.0, 0.0], angle: 1.0 }.validate().is_err());
        assert!(Event::InjectJump { axis: [0.0, 0.0, 1.0], angle: f64::NAN }.validate().is_err());
        assert!(Event::InjectJump { axis: [0.0, 0.0, 1.0], angle: 1.0 }.validate().is_ok());
    }

    #[test]
    fn script_parsing_and_lookup() {
        let text = "# demo\n{\"tick\": 5, \"event\": {\"kind\": \"Pause\"}}\n\n{\"tick\": 2, \"event\": {\"kind\": \"SetDrift\", \"sigma\": 0.001}}\n{\"tick\": 5, \"event\": {\"kind\": \"Resume\"}}\n";
        let s = EventScript::from_jsonl(text.as_bytes()).unwrap();
        assert_eq!(s.events().len(), 3);
        assert_eq!(s.at(2).count(), 1);
        let at5: Vec<_> = s.at(5).cloned().collect();
        assert_eq!(at5, vec![Event::Pause, Event::Resume]);
        assert_eq!(s.at(3).count(), 0);
        assert!(EventScript::from_jsonl("{\"tick\": 1}".as_bytes()).is_err());
    }

    #[test]
    fn square_wave_alternates() {
        let s = EventScript::square_wave(Sop::H, Sop::R, 10, 4, 30);
        let ticks: Vec<_> = s.events().iter().map(|e| e.tick).collect();
        assert_eq!(ticks, vec![10, 14, 18, 22, 26]);
        assert_eq!(s.events()[0].event, Event::SetTarget { sop: Sop::R });
        assert_eq!(s.events()[1].event, Event::SetTarget { sop: Sop::H });
    }
}
