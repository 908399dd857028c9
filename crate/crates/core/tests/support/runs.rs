//! Helpers for driving sim runs and checking invariants on their traces.

use raise_core::ops::trace::{verify_trace, EventKind, MemoryTrace, TraceEvent};
use raise_core::{CandidateId, Engine, RunConfig, RunState, WorldSpec};
use serde_json::Value;

pub const PROMPT: &str = "a red car parked beside a blue bicycle under a street lamp";

pub fn fixed_clock() -> String {
    "2026-01-01T00:00:00.000Z".to_string()
}

pub struct SimRun {
    pub state: RunState,
    pub text: String,
    pub events: Vec<TraceEvent>,
}

pub fn sim_run(config: RunConfig, prompt: &str) -> SimRun {
    let engine = Engine::sim(config, prompt);
    let mut trace = MemoryTrace::memory().with_clock(fixed_clock);
    let state = engine.run(prompt, &mut trace);
    let text = String::from_utf8(trace.bytes().to_vec()).expect("trace is utf-8");
    let events = trace.events().to_vec();
    SimRun { state, text, events }
}

pub fn config_with(world: WorldSpec, seed: u64) -> RunConfig {
    RunConfig { run_seed: seed, sim_world: Some(world), ..RunConfig::default() }
}

fn id(v: &Value) -> CandidateId {
    serde_json::from_value(v.clone()).expect("candidate id")
}

/// Selection invariants read back from trace text alone:
/// global-best fitness never decreases, the global best is always some
/// round's round-best, and the final pick is the argmax over every scored
/// candidate under the (round, slot) tie-break.
pub fn check_selection(text: &str) -> Result<(), String> {
    let events = verify_trace(text).map_err(|e| e.to_string())?;
    let mut round_bests: Vec<CandidateId> = Vec::new();
    let mut last_global = f64::NEG_INFINITY;
    let mut best: Option<(f64, CandidateId)> = None;
    for e in &events {
        match e.kind {
            EventKind::CandidatesScored => {
                for s in e.payload["scores"].as_array().ok_or("scores missing")? {
                    let (f, c) = (s["fitness"].as_f64().ok_or("fitness missing")?, id(&s["candidate"]));
                    // earlier ids win ties, so only a strictly larger value replaces
                    if best.is_none_or(|(bf, bc)| f > bf || (f == bf && c < bc)) {
                        best = Some((f, c));
                    }
                }
            }
            EventKind::RoundBestSelected => {
                let p = &e.payload;
                round_bests.push(id(&p["round_best"]));
                let gf = p["global_fitness"].as_f64().ok_or("global_fitness missing")?;
                if gf < last_global {
                    return Err(format!("global fitness fell from {last_global} to {gf} at event {}", e.sequence));
                }
                last_global = gf;
                let gb = id(&p["global_best"]);
                if !round_bests.contains(&gb) {
                    return Err(format!("global best {gb} was never a round best"));
                }
                if best.map(|(_, c)| c) != Some(gb) {
                    return Err(format!("global best {gb} is not the running argmax {best:?}"));
                }
            }
            EventKind::RunEnd => {
                let gb = &e.payload["global_best"];
                if !gb.is_null() && best.map(|(_, c)| c) != Some(id(gb)) {
                    return Err(format!("final pick {gb} is not the argmax {best:?}"));
                }
            }
            _ => {}
        }
    }
    Ok(())
}
