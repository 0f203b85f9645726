//! Append-only event recording and the trace line grammar.
//!
//! ```text
//! EV <step> <KIND> key=value key=value ...
//! ```
//!
//! Step numbers are decimal; numeric payload values are lowercase hex with
//! a `0x` prefix. Keys appear in a fixed order per kind (see [`schema`]).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Step,
    Trap,
    Link,
    Gate,
    Fault,
    Alarm,
    Io,
    Halt,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::Step,
        EventKind::Trap,
        EventKind::Link,
        EventKind::Gate,
        EventKind::Fault,
        EventKind::Alarm,
        EventKind::Io,
        EventKind::Halt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Step => "STEP",
            EventKind::Trap => "TRAP",
            EventKind::Link => "LINK",
            EventKind::Gate => "GATE",
            EventKind::Fault => "FAULT",
            EventKind::Alarm => "ALARM",
            EventKind::Io => "IO",
            EventKind::Halt => "HALT",
        }
    }
}

impl FromStr for EventKind {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TraceError::UnknownKind(s.to_string()))
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Key order for each kind. TRAP has one layout per phase.
const STEP_KEYS: &[&str] = &["layer", "at", "op", "mode", "arg"];
const TRAP_ENTER_KEYS: &[&str] = &[
    "phase", "kind", "at", "layer", "policy", "handler", "depth", "detail",
];
const TRAP_RESUME_KEYS: &[&str] = &["phase", "kind", "to", "layer", "depth"];
const LINK_KEYS: &[&str] = &[
    "pid", "seg", "slot", "sym", "suid", "len", "S", "U", "K", "gate", "handler",
];
const GATE_KEYS: &[&str] = &["dir", "from", "to", "via", "sd", "ud", "kd"];
const FAULT_KEYS: &[&str] = &["kind", "suid", "offset", "access", "layer", "at"];
const ALARM_KEYS: &[&str] = &["kind", "suid", "offset", "access", "layer", "code"];
const IO_KEYS: &[&str] = &["dir", "val", "eof"];
const HALT_KEYS: &[&str] = &["code", "reason", "layer", "sd", "ud", "kd"];

/// Checks that `fields` carries exactly the keys of `kind`, in order.
pub fn schema(kind: EventKind, fields: &[(String, String)]) -> Result<(), TraceError> {
    let expected = match kind {
        EventKind::Step => STEP_KEYS,
        EventKind::Trap => match fields.first().map(|(_, v)| v.as_str()) {
            Some("resume") => TRAP_RESUME_KEYS,
            _ => TRAP_ENTER_KEYS,
        },
        EventKind::Link => LINK_KEYS,
        EventKind::Gate => GATE_KEYS,
        EventKind::Fault => FAULT_KEYS,
        EventKind::Alarm => ALARM_KEYS,
        EventKind::Io => IO_KEYS,
        EventKind::Halt => HALT_KEYS,
    };
    let keys: Vec<&str> = fields.iter().map(|(k, _)| k.as_str()).collect();
    if keys == expected {
        Ok(())
    } else {
        Err(TraceError::Schema {
            kind,
            keys: keys.join(","),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown event kind `{0}`")]
    UnknownKind(String),
    #[error("{kind} event has keys [{keys}]")]
    Schema { kind: EventKind, keys: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub step: u64,
    pub kind: EventKind,
    pub fields: Vec<(String, String)>,
}

impl Event {
    pub fn new(step: u64, kind: EventKind) -> Self {
        Self {
            step,
            kind,
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    /// Adds a numeric field rendered as lowercase hex.
    pub fn hex(self, key: &str, value: u64) -> Self {
        self.with(key, format_args!("{value:#x}"))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Numeric field value, parsed from its `0x` form.
    pub fn get_hex(&self, key: &str) -> Option<u64> {
        parse_hex(self.get(key)?)
    }

    /// The line without its step number, for comparing payloads across runs.
    pub fn payload(&self) -> String {
        let mut s = self.kind.as_str().to_string();
        for (k, v) in &self.fields {
            s.push(' ');
            s.push_str(k);
            s.push('=');
            s.push_str(v);
        }
        s
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EV {} {}", self.step, self.payload())
    }
}

pub fn parse_hex(s: &str) -> Option<u64> {
    let digits = s.strip_prefix("0x")?;
    if digits.is_empty() || digits.chars().any(|c| c.is_ascii_uppercase()) {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

impl Event {
    /// Parses one trace line and validates it against the schema.
    pub fn parse_line(line: &str, lineno: usize) -> Result<Event, TraceError> {
        let err = |msg: &str| TraceError::Syntax {
            line: lineno,
            msg: msg.to_string(),
        };
        let mut parts = line.split(' ');
        if parts.next() != Some("EV") {
            return Err(err("expected `EV`"));
        }
        let step = parts
            .next()
            .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad step number"))?;
        let kind: EventKind = parts.next().ok_or_else(|| err("missing kind"))?.parse()?;
        let mut fields = Vec::new();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .filter(|(k, v)| !k.is_empty() && !v.is_empty() && !v.contains('='))
                .ok_or_else(|| err("malformed key=value"))?;
            fields.push((k.to_string(), v.to_string()));
        }
        schema(kind, &fields)?;
        Ok(Event { step, kind, fields })
    }
}

/// Append-only event sequence with nondecreasing step numbers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `event`. Step numbers must not go backwards.
    pub fn log_event(&mut self, event: Event) {
        debug_assert!(self.events.last().is_none_or(|e| e.step <= event.step));
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Event> {
        self.events.iter()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// One line per event, each terminated by `\n`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<EventLog, TraceError> {
        let mut log = EventLog::new();
        for (i, line) in text.lines().enumerate() {
            let ev = Event::parse_line(line, i + 1)?;
            if log.events.last().is_some_and(|e| e.step > ev.step) {
                return Err(TraceError::Syntax {
                    line: i + 1,
                    msg: "step numbers go backwards".into(),
                });
            }
            log.events.push(ev);
        }
        Ok(log)
    }
}
