//! Messages exchanged between the engine, adapters and telemetry consumers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::is_url_safe;
use crate::value::Value;

/// Milliseconds. Wall-clock epoch time in real-time mode, simulated time in
/// stepped mode.
pub type Millis = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEnvelope {
    pub command_id: String,
    pub capability_id: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    pub issued_at: Millis,
    pub timeout_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunEventKind {
    AdapterRegistered,
    Accepted,
    Started,
    Completed,
    Failed,
    Timeout,
}

impl RunEventKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Completed | Self::Failed | Self::Timeout)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AdapterRegistered => "adapter_registered",
            Self::Accepted => "accepted",
            Self::Started => "started",
            Self::Completed => "completed",
            Self::Failed => "failed",
            Self::Timeout => "timeout",
        }
    }
}

impl fmt::Display for RunEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEvent {
    pub event_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_id: Option<String>,
    pub kind: RunEventKind,
    #[serde(default)]
    pub detail: String,
    pub at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OrderViolation {
    #[error("command {command_id}: {kind} after terminal event")]
    AfterTerminal { command_id: String, kind: RunEventKind },
    #[error("command {command_id}: {kind} does not follow {previous:?}")]
    OutOfOrder {
        command_id: String,
        kind: RunEventKind,
        previous: Option<RunEventKind>,
    },
    #[error("adapter_registered event carries command id {0}")]
    RegistrationWithCommand(String),
}

/// Checks that each command's events form a prefix of
/// `accepted -> started -> (completed | failed | timeout)`.
///
/// `failed` and `timeout` may also follow `accepted` directly since a
/// handshake can fail before the machine reports busy.
#[derive(Debug, Default, Clone)]
pub struct EventOrder {
    last: HashMap<String, RunEventKind>,
}

impl EventOrder {
    pub fn observe(&mut self, ev: &RunEvent) -> Result<(), OrderViolation> {
        let Some(id) = &ev.command_id else {
            return Ok(());
        };
        if ev.kind == RunEventKind::AdapterRegistered {
            return Err(OrderViolation::RegistrationWithCommand(id.clone()));
        }
        let prev = self.last.get(id).copied();
        if prev.is_some_and(RunEventKind::is_terminal) {
            return Err(OrderViolation::AfterTerminal {
                command_id: id.clone(),
                kind: ev.kind,
            });
        }
        use RunEventKind::*;
        let ok = matches!(
            (prev, ev.kind),
            (None, Accepted)
                | (Some(Accepted), Started | Failed | Timeout)
                | (Some(Started), Completed | Failed | Timeout)
        );
        if !ok {
            return Err(OrderViolation::OutOfOrder {
                command_id: id.clone(),
                kind: ev.kind,
                previous: prev,
            });
        }
        self.last.insert(id.clone(), ev.kind);
        Ok(())
    }

    pub fn terminal(&self, command_id: &str) -> Option<RunEventKind> {
        self.last.get(command_id).copied().filter(|k| k.is_terminal())
    }

    pub fn open_commands(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .last
            .iter()
            .filter(|(_, k)| !k.is_terminal())
            .map(|(id, _)| id.as_str())
            .collect();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub topic: String,
    pub value: Value,
    pub at: Millis,
}

pub fn topic(plant_id: &str, machine_id: &str, signal: &str) -> String {
    format!("plant/{plant_id}/{machine_id}/{signal}")
}

/// `plant/<id>/<id>/<name>` with URL-safe segments.
pub fn is_valid_topic(t: &str) -> bool {
    let parts: Vec<&str> = t.split('/').collect();
    parts.len() == 4 && parts[0] == "plant" && parts[1..].iter().all(|p| is_url_safe(p))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FilterError {
    #[error("empty topic filter")]
    Empty,
    #[error("empty segment at position {0}")]
    EmptySegment(usize),
    #[error("'#' must be the whole last segment")]
    MisplacedHash,
    #[error("'+' must be a whole segment")]
    MisplacedPlus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Exact(String),
    /// `+`
    Any,
    /// Segment with `*` wildcards matching any run of characters.
    Glob(Vec<String>),
}

/// MQTT-style topic filter. `+` matches one segment, a trailing `#` matches
/// the rest, and `*` inside a segment matches any characters of that segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicFilter {
    segments: Vec<Segment>,
    rest: bool,
    source: String,
}

impl TopicFilter {
    pub fn parse(filter: &str) -> Result<Self, FilterError> {
        if filter.is_empty() {
            return Err(FilterError::Empty);
        }
        let parts: Vec<&str> = filter.split('/').collect();
        let mut segments = Vec::with_capacity(parts.len());
        let mut rest = false;
        for (i, p) in parts.iter().enumerate() {
            if p.is_empty() {
                return Err(FilterError::EmptySegment(i));
            }
            if p.contains('#') {
                if *p != "#" || i + 1 != parts.len() {
                    return Err(FilterError::MisplacedHash);
                }
                rest = true;
            } else if p.contains('+') {
                if *p != "+" {
                    return Err(FilterError::MisplacedPlus);
                }
                segments.push(Segment::Any);
            } else if p.contains('*') {
                segments.push(Segment::Glob(p.split('*').map(str::to_string).collect()));
            } else {
                segments.push(Segment::Exact(p.to_string()));
            }
        }
        Ok(TopicFilter {
            segments,
            rest,
            source: filter.to_string(),
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn matches(&self, topic: &str) -> bool {
        let parts: Vec<&str> = topic.split('/').collect();
        if parts.len() < self.segments.len() || (!self.rest && parts.len() != self.segments.len()) {
            return false;
        }
        self.segments.iter().zip(&parts).all(|(s, p)| match s {
            Segment::Exact(e) => e == p,
            Segment::Any => true,
            Segment::Glob(pieces) => glob_match(pieces, p),
        })
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

/// `pieces` is the segment split on `*`; there is a wildcard between each pair.
fn glob_match(pieces: &[String], s: &str) -> bool {
    let (first, last) = (&pieces[0], &pieces[pieces.len() - 1]);
    if !s.starts_with(first.as_str()) {
        return false;
    }
    let mut pos = first.len();
    for mid in &pieces[1..pieces.len() - 1] {
        match s[pos..].find(mid.as_str()) {
            Some(i) => pos += i + mid.len(),
            None => return false,
        }
    }
    s.len() >= pos + last.len() && s.ends_with(last.as_str())
}

/// Whether adapters talk to the virtual plant or to real controllers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Virtual,
    Physical,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Virtual => "virtual",
            Mode::Physical => "physical",
        })
    }
}
