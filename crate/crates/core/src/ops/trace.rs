//! Append-only JSONL event trace.
//!
//! Each line is one [`TraceEvent`]. `hash` is the SHA-256 of the previous
//! line's hash followed by the event's canonical JSON without the hash
//! field, so any edit to a line breaks the chain from that line on.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStart,
    RoundStart,
    AgentCall,
    PopulationBuilt,
    CandidateExecuted,
    CandidatesScored,
    RoundBestSelected,
    GroundingAcquired,
    VerifierResult,
    RoundEnd,
    RunEnd,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RunStart => "run_start",
            Self::RoundStart => "round_start",
            Self::AgentCall => "agent_call",
            Self::PopulationBuilt => "population_built",
            Self::CandidateExecuted => "candidate_executed",
            Self::CandidatesScored => "candidates_scored",
            Self::RoundBestSelected => "round_best_selected",
            Self::GroundingAcquired => "grounding_acquired",
            Self::VerifierResult => "verifier_result",
            Self::RoundEnd => "round_end",
            Self::RunEnd => "run_end",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub sequence: u64,
    pub kind: EventKind,
    pub round: Option<u32>,
    pub payload: Value,
    pub timestamp: String,
    pub hash: String,
}

#[derive(Serialize)]
struct Unhashed<'a> {
    sequence: u64,
    kind: EventKind,
    round: Option<u32>,
    payload: &'a Value,
    timestamp: &'a str,
}

fn chain_hash(prev: &str, sequence: u64, kind: EventKind, round: Option<u32>, payload: &Value, timestamp: &str) -> String {
    let body = serde_json::to_string(&Unhashed { sequence, kind, round, payload, timestamp })
        .expect("trace events serialize");
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(body.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl TraceEvent {
    pub fn expected_hash(&self, prev: &str) -> String {
        chain_hash(prev, self.sequence, self.kind, self.round, &self.payload, &self.timestamp)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace events serialize")
    }

    /// The event with timestamp and hash blanked, for replay comparison.
    pub fn masked(&self) -> String {
        let mut e = self.clone();
        e.timestamp.clear();
        e.hash.clear();
        e.to_line()
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io error: {0}")]
    Io(#[from] io::Error),
    #[error("trace file is empty")]
    Empty,
    #[error("line {line}: not a trace event: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: not in canonical form")]
    NonCanonical { line: usize },
    #[error("line {line}: sequence {found} does not follow {previous}")]
    Sequence { line: usize, previous: u64, found: u64 },
    #[error("line {line}: hash chain broken")]
    Hash { line: usize },
}

/// Receives engine events.
pub trait TraceSink {
    fn emit(&mut self, kind: EventKind, round: Option<u32>, payload: Value) -> Result<(), TraceError>;
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullTrace;

impl TraceSink for NullTrace {
    fn emit(&mut self, _: EventKind, _: Option<u32>, _: Value) -> Result<(), TraceError> {
        Ok(())
    }
}

pub type Clock = fn() -> String;

pub fn wall_clock() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes hash-chained lines to `W`, flushing after every event.
pub struct TraceWriter<W: Write> {
    out: W,
    next_sequence: u64,
    prev_hash: String,
    clock: Clock,
    events: Vec<TraceEvent>,
    keep: bool,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, next_sequence: 0, prev_hash: GENESIS_HASH.to_string(), clock: wall_clock, events: Vec::new(), keep: false }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// Also keep emitted events in memory.
    pub fn retaining(mut self) -> Self {
        self.keep = true;
        self
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TraceSink for TraceWriter<W> {
    fn emit(&mut self, kind: EventKind, round: Option<u32>, payload: Value) -> Result<(), TraceError> {
        let sequence = self.next_sequence;
        let timestamp = (self.clock)();
        let hash = chain_hash(&self.prev_hash, sequence, kind, round, &payload, &timestamp);
        let event = TraceEvent { sequence, kind, round, payload, timestamp, hash };
        let mut line = event.to_line();
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        self.out.flush()?;
        self.next_sequence += 1;
        self.prev_hash = event.hash.clone();
        if self.keep {
            self.events.push(event);
        }
        Ok(())
    }
}

/// In-memory trace; the bytes are exactly what a file would hold.
pub type MemoryTrace = TraceWriter<Vec<u8>>;

impl MemoryTrace {
    pub fn memory() -> Self {
        TraceWriter::new(Vec::new()).retaining()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.out
    }
}

/// Parses and fully verifies a trace: canonical form, strictly increasing
/// sequence and an unbroken hash chain.
pub fn verify_trace(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    if text.is_empty() {
        return Err(TraceError::Empty);
    }
    let body = text.strip_suffix('\n').ok_or(TraceError::Parse {
        line: text.lines().count(),
        reason: "missing final newline".into(),
    })?;
    let mut prev = GENESIS_HASH.to_string();
    let mut events: Vec<TraceEvent> = Vec::new();
    for (i, raw) in body.split('\n').enumerate() {
        let line = i + 1;
        let event: TraceEvent = serde_json::from_str(raw).map_err(|e| TraceError::Parse { line, reason: e.to_string() })?;
        if event.to_line() != raw {
            return Err(TraceError::NonCanonical { line });
        }
        if let Some(last) = events.last() {
            if event.sequence <= last.sequence {
                return Err(TraceError::Sequence { line, previous: last.sequence, found: event.sequence });
            }
        }
        if event.hash != event.expected_hash(&prev) {
            return Err(TraceError::Hash { line });
        }
        prev = event.hash.clone();
        events.push(event);
    }
    Ok(events)
}

/// Events successfully parsed before the first unreadable line, plus the
/// problem that stopped reading, if any. Does not check hashes.
pub fn read_lenient(reader: impl BufRead) -> Result<(Vec<TraceEvent>, Option<String>), TraceError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceEvent>(&line) {
            Ok(e) => events.push(e),
            Err(e) => return Ok((events, Some(format!("line {}: {e}", i + 1)))),
        }
    }
    if events.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok((events, None))
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    verify_trace(&std::fs::read_to_string(path)?)
}
