use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde_json::Value;

use crate::error::{RetainError, Result};
use crate::model::{ContributionEvent, EventKind};

/// Load events from a JSON Lines file, one event object per line.
pub fn load_events_jsonl(path: impl AsRef<Path>) -> Result<Vec<ContributionEvent>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| RetainError::io(path, e))?;
    parse_events_jsonl(BufReader::new(file)).map_err(|e| match e {
        RetainError::Io { source, .. } => RetainError::io(path, source),
        other => other,
    })
}

/// Parse JSONL from any reader. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_events_jsonl(reader: impl BufRead) -> Result<Vec<ContributionEvent>> {
    let mut events = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| RetainError::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event = parse_line(&line, line_no)?;
        if !seen.insert(event.event_id.clone()) {
            return Err(RetainError::DuplicateEvent {
                line: line_no,
                event_id: event.event_id,
            });
        }
        events.push(event);
    }
    tracing::debug!(count = events.len(), "parsed events");
    Ok(events)
}

fn parse_line(line: &str, line_no: usize) -> Result<ContributionEvent> {
    let malformed = |message: String| RetainError::MalformedLine {
        line: line_no,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    if let Some(kind) = value.get("kind").and_then(Value::as_str) {
        if kind.parse::<EventKind>().is_err() {
            return Err(RetainError::UnknownKind {
                line: line_no,
                kind: kind.to_string(),
            });
        }
    }
    let event: ContributionEvent =
        serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if event.timestamp <= 0 {
        return Err(malformed(format!("timestamp must be positive, got {}", event.timestamp)));
    }
    if event.event_id.is_empty() {
        return Err(malformed("empty event_id".into()));
    }
    let mut tags = BTreeSet::new();
    if let Some(dup) = event.tags.iter().find(|t| !tags.insert(t.as_str())) {
        return Err(malformed(format!("duplicate tag `{dup}`")));
    }
    Ok(event)
}

/// Canonical JSONL encoding: schema field order, LF line endings.
pub fn events_to_jsonl(events: &[ContributionEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

pub fn write_events_jsonl(path: impl AsRef<Path>, events: &[ContributionEvent]) -> Result<()> {
    crate::store::write_atomic(path.as_ref(), events_to_jsonl(events).as_bytes())
}
