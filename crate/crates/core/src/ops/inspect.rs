//! Human-readable narrative of a trace, round by round.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde_json::Value;

use super::trace::{EventKind, TraceEvent};

fn id_str(v: &Value) -> String {
    match (v["round"].as_u64(), v["slot"].as_u64()) {
        (Some(r), Some(s)) => format!("r{r}_s{s}"),
        _ => "?".to_string(),
    }
}

fn index_set(v: &Value) -> BTreeSet<u64> {
    v.as_array().into_iter().flatten().filter_map(Value::as_u64).collect()
}

#[derive(Default)]
struct Checklist {
    texts: Vec<String>,
    satisfied: BTreeSet<u64>,
}

impl Checklist {
    fn text(&self, i: u64) -> &str {
        self.texts.get(i as usize).map_or("?", String::as_str)
    }
}

fn analyzer_checklist(payload: &Value) -> Option<Checklist> {
    let c = payload.pointer("/outcome/output/checklist")?;
    let texts = c["requirements"]
        .as_array()?
        .iter()
        .map(|r| r["text"].as_str().unwrap_or_default().to_string())
        .collect();
    Some(Checklist { texts, satisfied: index_set(&c["satisfied"]) })
}

/// Renders the narrative. `warning` is the reader's note about where
/// parsing stopped, if it did.
pub fn render_inspect(events: &[TraceEvent], warning: Option<&str>) -> String {
    let mut out = String::new();
    let mut prev_sat: BTreeSet<u64> = BTreeSet::new();
    let mut ended = false;
    for e in events {
        let p = &e.payload;
        let round = e.round.unwrap_or(0);
        match e.kind {
            EventKind::RunStart => {
                let _ = writeln!(out, "prompt: {}", p["user_prompt"].as_str().unwrap_or("?"));
                let _ = writeln!(out, "backend: {}", p["backend_profile"].as_str().unwrap_or("?"));
            }
            EventKind::RoundStart => {
                let _ = writeln!(out, "\n== round {round} ({}) ==", p["phase"].as_str().unwrap_or("?"));
            }
            EventKind::AgentCall => {
                let role = p["role"].as_str().unwrap_or("?");
                let attempts = p["attempts"].as_u64().unwrap_or(0);
                if let Some(err) = p.pointer("/outcome/error").and_then(Value::as_str) {
                    let _ = writeln!(out, "  {role}: FAILED after {attempts} attempt(s): {err}");
                    continue;
                }
                let retry = if attempts > 1 { format!(" ({attempts} attempts)") } else { String::new() };
                if role == "analyzer" {
                    let decision = p.pointer("/outcome/output/decision").and_then(Value::as_str).unwrap_or("?");
                    let _ = writeln!(out, "  analyzer{retry}: decision {decision}");
                    if let Some(c) = analyzer_checklist(p) {
                        let _ = writeln!(out, "    requirements: {} ({} satisfied)", c.texts.len(), c.satisfied.len());
                        for i in c.satisfied.difference(&prev_sat) {
                            let _ = writeln!(out, "    + {}", c.text(*i));
                        }
                        for i in prev_sat.difference(&c.satisfied) {
                            let _ = writeln!(out, "    - {}", c.text(*i));
                        }
                        prev_sat = c.satisfied;
                    }
                } else {
                    let _ = writeln!(out, "  {role}{retry}: ok");
                }
            }
            EventKind::PopulationBuilt => {
                let plan: Vec<String> = p["plan"]
                    .as_object()
                    .into_iter()
                    .flatten()
                    .map(|(k, n)| format!("{k}={n}"))
                    .collect();
                let _ = writeln!(out, "  plan: {}", plan.join(" "));
                for n in p["notes"].as_array().into_iter().flatten() {
                    let _ = writeln!(out, "    note: {}", n.as_str().unwrap_or_default());
                }
            }
            EventKind::CandidateExecuted => {
                if let Some(f) = p.pointer("/output/failure").and_then(Value::as_str) {
                    let _ = writeln!(out, "  {} failed: {f}", id_str(&p["candidate"]));
                }
            }
            EventKind::CandidatesScored => {
                let scores: Vec<String> = p["scores"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|s| format!("{}={:.3}", id_str(&s["candidate"]), s["fitness"].as_f64().unwrap_or(f64::NAN)))
                    .collect();
                let _ = writeln!(out, "  fitness: {}", scores.join(" "));
                for x in p["excluded"].as_array().into_iter().flatten() {
                    let _ = writeln!(out, "    excluded {}: {}", id_str(&x["candidate"]), x["note"].as_str().unwrap_or_default());
                }
            }
            EventKind::RoundBestSelected => {
                let _ = writeln!(
                    out,
                    "  round best: {} ({:.3}); global best: {} ({:.3})",
                    id_str(&p["round_best"]),
                    p["fitness"].as_f64().unwrap_or(f64::NAN),
                    id_str(&p["global_best"]),
                    p["global_fitness"].as_f64().unwrap_or(f64::NAN)
                );
            }
            EventKind::GroundingAcquired => {
                let regions = p.pointer("/evidence/regions").and_then(Value::as_array).map_or(0, Vec::len);
                if p["evidence"].is_null() {
                    let _ = writeln!(out, "  grounding: none (ungrounded)");
                } else {
                    let _ = writeln!(out, "  grounding: {regions} region(s)");
                }
            }
            EventKind::VerifierResult => {
                let o = &p["output"];
                for t in o["triplets"].as_array().into_iter().flatten() {
                    let _ = writeln!(
                        out,
                        "    {} -> {}",
                        t["question"].as_str().unwrap_or("?"),
                        t["answer"].as_str().unwrap_or("?")
                    );
                }
                let _ = writeln!(out, "  verifier: all_satisfied={}", o["all_satisfied"].as_bool().unwrap_or(false));
            }
            EventKind::RoundEnd => {
                let _ = writeln!(
                    out,
                    "  round totals: {} calls, {} samples",
                    p["agent_calls"].as_u64().unwrap_or(0),
                    p["samples"].as_u64().unwrap_or(0)
                );
            }
            EventKind::RunEnd => {
                ended = true;
                let t = &p["termination"];
                let _ = writeln!(
                    out,
                    "\ntermination: {} at round {}",
                    t["kind"].as_str().unwrap_or("?"),
                    t["round"].as_u64().unwrap_or(0)
                );
                if let Some(err) = p["error"].as_str() {
                    let _ = writeln!(out, "error: {err}");
                }
                let _ = writeln!(
                    out,
                    "final: {} (fitness {})",
                    id_str(&p["global_best"]),
                    p["final_fitness"].as_f64().map_or("n/a".to_string(), |f| format!("{f:.3}"))
                );
                let _ = writeln!(
                    out,
                    "totals: {} samples, {} agent calls",
                    p["total_samples"].as_u64().unwrap_or(0),
                    p["total_agent_calls"].as_u64().unwrap_or(0)
                );
            }
        }
    }
    if let Some(w) = warning {
        let _ = writeln!(out, "\nwarning: trace truncated ({w})");
    }
    if !ended {
        let _ = writeln!(out, "\nwarning: trace has no run_end event; the run did not finish");
    }
    out
}
