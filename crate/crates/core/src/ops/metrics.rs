//! Efficiency report over a batch: mean samples generated and mean agent
//! calls per run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::store::RunSummary;
use super::trace::{EventKind, TraceEvent};
use crate::model::TerminationKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: u32,
    pub avg_samples: f64,
    pub avg_agent_calls: f64,
    pub terminations: BTreeMap<TerminationKind, u32>,
    /// Completed rounds → number of runs.
    pub rounds_histogram: BTreeMap<u32, u32>,
}

/// Per-run totals, from a summary or recomputed from a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTotals {
    pub samples: u32,
    pub agent_calls: u32,
    pub rounds: u32,
    pub termination: TerminationKind,
}

impl From<&RunSummary> for RunTotals {
    fn from(s: &RunSummary) -> Self {
        Self { samples: s.total_samples, agent_calls: s.total_agent_calls, rounds: s.rounds, termination: s.termination.kind }
    }
}

/// Recounts a run from its events: one sample per executed candidate, one
/// call per successful agent call, one round per round end.
pub fn totals_from_trace(events: &[TraceEvent]) -> Result<RunTotals, String> {
    let count = |kind: EventKind| events.iter().filter(|e| e.kind == kind).count() as u32;
    let agent_calls = events
        .iter()
        .filter(|e| e.kind == EventKind::AgentCall && e.payload.pointer("/outcome/output").is_some())
        .count() as u32;
    let end = events
        .iter()
        .rev()
        .find(|e| e.kind == EventKind::RunEnd)
        .ok_or("trace has no run_end event")?;
    let termination = serde_json::from_value(end.payload["termination"]["kind"].clone())
        .map_err(|e| format!("run_end has no termination kind: {e}"))?;
    Ok(RunTotals {
        samples: count(EventKind::CandidateExecuted),
        agent_calls,
        rounds: count(EventKind::RoundEnd),
        termination,
    })
}

impl MetricsReport {
    pub fn from_totals(totals: &[RunTotals]) -> Option<Self> {
        if totals.is_empty() {
            return None;
        }
        let runs = totals.len() as u32;
        let sum = |f: fn(&RunTotals) -> u32| totals.iter().map(|t| u64::from(f(t))).sum::<u64>() as f64;
        let mut terminations = BTreeMap::new();
        let mut rounds_histogram = BTreeMap::new();
        for t in totals {
            *terminations.entry(t.termination).or_insert(0) += 1;
            *rounds_histogram.entry(t.rounds).or_insert(0) += 1;
        }
        Some(Self {
            runs,
            avg_samples: sum(|t| t.samples) / f64::from(runs),
            avg_agent_calls: sum(|t| t.agent_calls) / f64::from(runs),
            terminations,
            rounds_histogram,
        })
    }

    pub fn from_summaries(summaries: &[RunSummary]) -> Option<Self> {
        Self::from_totals(&summaries.iter().map(RunTotals::from).collect::<Vec<_>>())
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "runs: {}\navg samples generated: {:.2}\navg agent calls: {:.2}\n",
            self.runs, self.avg_samples, self.avg_agent_calls
        );
        out.push_str("terminations:\n");
        for (k, n) in &self.terminations {
            out.push_str(&format!("  {}: {n}\n", k.as_str()));
        }
        out.push_str("rounds:\n");
        for (r, n) in &self.rounds_histogram {
            out.push_str(&format!("  {r}: {n}\n"));
        }
        out
    }
}
