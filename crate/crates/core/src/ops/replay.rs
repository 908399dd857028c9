//! Re-executes a sim-backend run and compares it with the recorded trace,
//! timestamps and hashes masked.

use std::path::Path;

use thiserror::Error;

use super::trace::{verify_trace, EventKind, MemoryTrace, TraceError, TraceEvent};
use crate::config::RunConfig;
use crate::engine::Engine;
use crate::model::RunState;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("trace does not start with run_start")]
    MissingRunStart,
    #[error("trace was recorded with the {0:?} backend profile; only sim traces can be replayed")]
    NotSim(String),
    #[error("divergence at event {sequence} ({kind}):\n  recorded: {recorded}\n  replayed: {replayed}")]
    Divergence { sequence: u64, kind: EventKind, recorded: String, replayed: String },
    #[error("divergence after event {after}: recorded {recorded} events, replay produced {replayed}")]
    Length { after: u64, recorded: usize, replayed: usize },
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub state: RunState,
    pub events: usize,
}

fn parse_lines(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    if text.is_empty() {
        return Err(TraceError::Empty);
    }
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| TraceError::Parse { line: i + 1, reason: e.to_string() }))
        .collect()
}

/// Replays against already-parsed events. Compares masked events in order
/// and reports the first difference.
pub fn replay_events(recorded: &[TraceEvent], config: &RunConfig) -> Result<ReplayOutcome, ReplayError> {
    let start = recorded.first().filter(|e| e.kind == EventKind::RunStart).ok_or(ReplayError::MissingRunStart)?;
    let profile = start.payload["backend_profile"].as_str().unwrap_or_default();
    if profile != "sim" {
        return Err(ReplayError::NotSim(profile.to_string()));
    }
    let prompt = start.payload["user_prompt"].as_str().ok_or(ReplayError::MissingRunStart)?;
    let engine = Engine::sim(config.clone(), prompt);
    let mut trace = MemoryTrace::memory();
    let state = engine.run(prompt, &mut trace);
    let replayed = trace.events();
    for (r, p) in recorded.iter().zip(replayed) {
        let (a, b) = (r.masked(), p.masked());
        if a != b {
            return Err(ReplayError::Divergence { sequence: r.sequence, kind: r.kind, recorded: a, replayed: b });
        }
    }
    if recorded.len() != replayed.len() {
        let common = recorded.len().min(replayed.len());
        return Err(ReplayError::Length {
            after: recorded[common - 1].sequence,
            recorded: recorded.len(),
            replayed: replayed.len(),
        });
    }
    Ok(ReplayOutcome { state, events: replayed.len() })
}

/// Replays trace text: content divergence is reported first (naming the
/// event), then the hash chain and canonical form are checked, so edits to
/// masked fields are caught too.
pub fn replay_text(text: &str, config: &RunConfig) -> Result<ReplayOutcome, ReplayError> {
    let events = parse_lines(text)?;
    let outcome = replay_events(&events, config)?;
    verify_trace(text)?;
    Ok(outcome)
}

pub fn replay_file(path: &Path, config: &RunConfig) -> Result<ReplayOutcome, ReplayError> {
    let text = std::fs::read_to_string(path).map_err(TraceError::from)?;
    replay_text(&text, config)
}
