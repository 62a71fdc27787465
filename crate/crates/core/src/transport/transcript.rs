use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::keyspace::sha256_hex;
use crate::nodes::Millis;
use crate::protocol::Envelope;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Send,
    Deliver,
    Drop,
}

/// One line of `transcript.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub t: Millis,
    pub kind: EventKind,
    pub from: String,
    pub to: String,
    pub op: String,
    pub step: String,
    /// SHA-256 of the payload's canonical JSON.
    pub payload_digest: String,
    /// Present only when the transcript keeps full payloads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    full_payloads: bool,
    events: Vec<TranscriptEvent>,
}

impl Transcript {
    /// Keeps whole payloads (simulation).
    pub fn full() -> Self {
        Self { full_payloads: true, events: Vec::new() }
    }

    /// Keeps payload digests only (TCP).
    pub fn digests_only() -> Self {
        Self { full_payloads: false, events: Vec::new() }
    }

    pub fn keeps_payloads(&self) -> bool {
        self.full_payloads
    }

    pub fn record(&mut self, t: Millis, kind: EventKind, env: &Envelope) {
        let payload = env.message.payload_value();
        let canonical = serde_json::to_vec(&payload).expect("payload serializes");
        self.events.push(TranscriptEvent {
            t,
            kind,
            from: env.from.to_string(),
            to: env.to.to_string(),
            op: env.op.as_str().to_string(),
            step: env.step().to_string(),
            payload_digest: sha256_hex(&canonical),
            payload: self.full_payloads.then_some(payload),
        });
    }

    pub fn push(&mut self, event: TranscriptEvent) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[TranscriptEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Transcript, TranscriptError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: TranscriptEvent =
                serde_json::from_str(line).map_err(|err| TranscriptError::Malformed { line: i + 1, message: err.to_string() })?;
            events.push(e);
        }
        let full_payloads = !events.is_empty() && events.iter().all(|e| e.payload.is_some());
        Ok(Transcript { full_payloads, events })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TranscriptError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Transcript, TranscriptError> {
        Self::parse_jsonl(&std::fs::read_to_string(path)?)
    }
}
