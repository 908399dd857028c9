//! The round loop that drives a run from the first analysis to termination.

use std::collections::HashMap;

use serde_json::{json, Value};

use crate::agents::{AgentCallRecord, AgentClient, AgentError, AnalyzeInput, BestContext, ReferenceContext, RewriteInput};
use crate::backend::{Backends, Scorer};
use crate::config::RunConfig;
use crate::execution::{execute_population, ExecutionError};
use crate::grounding::acquire_grounding;
use crate::image::ImageStore;
use crate::model::{
    AnalyzerDecision, AnalyzerOutput, Candidate, CandidateId, CandidateKind, ExecutionResult, RoundRecord,
    RunState, ScoredCandidate, TerminationKind, TerminationReason,
};
use crate::ops::trace::{EventKind, TraceSink};
use crate::refinement::{build_population, schedule_actions, PopulationInputs};

/// Scores and exclusions for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutcome {
    pub scored: Vec<ScoredCandidate>,
    /// Successful executions the scorer could not score, with the reason.
    pub excluded: Vec<(CandidateId, String)>,
}

/// Scores every successful execution against the user prompt. Scorer
/// failures and non-finite scores are excluded from selection.
pub fn score_candidates(
    results: &[ExecutionResult],
    candidates: &[Candidate],
    user_prompt: &str,
    scorer: &dyn Scorer,
    images: &ImageStore,
) -> ScoreOutcome {
    let mut scored = Vec::new();
    let mut excluded = Vec::new();
    for r in results {
        let Some(image) = r.image() else { continue };
        let Some(candidate) = candidates.iter().find(|c| c.id() == r.candidate) else { continue };
        let fitness = images
            .get(image)
            .map_err(|e| e.to_string())
            .and_then(|bytes| scorer.score(&bytes, user_prompt).map_err(|e| e.to_string()))
            .and_then(|f| if f.is_finite() { Ok(f) } else { Err(format!("non-finite score {f}")) });
        match fitness {
            Ok(fitness) => scored.push(ScoredCandidate { candidate: candidate.clone(), output: image.clone(), fitness }),
            Err(note) => excluded.push((r.candidate, note)),
        }
    }
    ScoreOutcome { scored, excluded }
}

/// (round_best, global_best). Ties go to the earlier round, then the lower
/// slot. `None` when nothing was scored.
pub fn select_bests(scored: &[ScoredCandidate], prior: Option<&ScoredCandidate>) -> Option<(CandidateId, CandidateId)> {
    let mut best: Option<&ScoredCandidate> = None;
    for s in scored {
        match best {
            Some(b) if s.fitness > b.fitness || (s.fitness == b.fitness && s.id() < b.id()) => best = Some(s),
            None => best = Some(s),
            _ => {}
        }
    }
    let round_best = best?;
    let global = match prior {
        Some(p) if p.fitness > round_best.fitness || (p.fitness == round_best.fitness && p.id() < round_best.id()) => p,
        _ => round_best,
    };
    Some((round_best.id(), global.id()))
}

/// Stop check right after analysis, before any candidate is generated.
pub fn stop_after_analysis(round: u32, decision: AnalyzerDecision, config: &RunConfig) -> Option<TerminationReason> {
    (config.force_rounds.is_none() && decision == AnalyzerDecision::End && round >= config.k_min)
        .then_some(TerminationReason { kind: TerminationKind::AnalyzerEnd, round })
}

/// Stop check after verification.
pub fn stop_after_verification(round: u32, all_satisfied: bool, config: &RunConfig) -> Option<TerminationReason> {
    let reason = |kind| Some(TerminationReason { kind, round });
    if let Some(n) = config.force_rounds {
        return if round >= n { reason(TerminationKind::MaxRounds) } else { None };
    }
    if all_satisfied && round >= config.k_min {
        return reason(TerminationKind::VerifierAllSatisfied);
    }
    if round >= config.k_max {
        return reason(TerminationKind::MaxRounds);
    }
    None
}

/// Both checkpoints: pass `verifier_flag = None` for the analysis checkpoint.
pub fn decide_stop(
    round: u32,
    decision: AnalyzerDecision,
    verifier_flag: Option<bool>,
    config: &RunConfig,
) -> Option<TerminationReason> {
    match verifier_flag {
        None => stop_after_analysis(round, decision, config),
        Some(flag) => stop_after_verification(round, flag, config),
    }
}

pub struct Engine {
    config: RunConfig,
    backends: Backends,
    agents: AgentClient,
    images: ImageStore,
}

/// Mutable state of one run.
struct Run<'t> {
    state: RunState,
    trace: &'t mut dyn TraceSink,
    /// Descriptive prompt per candidate. Edits inherit their parent's.
    prompts: HashMap<CandidateId, String>,
}

impl Run<'_> {
    fn emit(&mut self, kind: EventKind, round: Option<u32>, payload: Value) -> Result<(), String> {
        self.trace.emit(kind, round, payload).map_err(|e| e.to_string())
    }

    fn agent_call<T>(&mut self, round: u32, result: Result<T, AgentError>, record: AgentCallRecord) -> Result<T, String> {
        self.emit(EventKind::AgentCall, Some(round), json!(record))?;
        let value = result.map_err(|e| e.to_string())?;
        self.state.total_agent_calls += 1;
        Ok(value)
    }

    fn global_best(&self) -> Option<&ScoredCandidate> {
        self.state.global_best_scored()
    }

    fn prompt_of(&self, id: CandidateId) -> String {
        self.prompts.get(&id).cloned().unwrap_or_else(|| self.state.user_prompt.clone())
    }
}

impl Engine {
    pub fn new(config: RunConfig, backends: Backends) -> Self {
        let agents = AgentClient::new(backends.chat.clone(), config.agent_retries);
        Self { config, backends, agents, images: ImageStore::new() }
    }

    /// Engine over in-process sim backends.
    pub fn sim(config: RunConfig, user_prompt: &str) -> Self {
        let backends = crate::sim::sim_backends(&config, user_prompt);
        Self::new(config, backends)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn images(&self) -> &ImageStore {
        &self.images
    }

    pub fn run(&self, user_prompt: &str, trace: &mut dyn TraceSink) -> RunState {
        let mut run = Run { state: RunState::new(user_prompt, self.config.clone()), trace, prompts: HashMap::new() };
        let result = run
            .emit(
                EventKind::RunStart,
                None,
                json!({"user_prompt": user_prompt, "backend_profile": self.backends.profile}),
            )
            .and_then(|()| self.rounds(&mut run));
        let reason = match result {
            Ok(reason) => reason,
            Err(e) => {
                let round = run.state.rounds.last().map_or(1, |r| r.round + 1).min(self.config.k_max);
                run.state.error = Some(e);
                TerminationReason { kind: TerminationKind::Error, round }
            }
        };
        run.state.termination = Some(reason);
        let s = &run.state;
        let payload = json!({
            "termination": reason,
            "error": s.error,
            "global_best": s.global_best,
            "final_fitness": s.global_best_scored().map(|b| b.fitness),
            "final_image": s.final_image(),
            "rounds": s.rounds.len(),
            "total_samples": s.total_samples,
            "total_agent_calls": s.total_agent_calls,
        });
        if let Err(e) = run.emit(EventKind::RunEnd, Some(reason.round), payload) {
            run.state.error.get_or_insert(e);
            run.state.termination = Some(TerminationReason { kind: TerminationKind::Error, round: reason.round });
        }
        run.state
    }

    fn rounds(&self, run: &mut Run<'_>) -> Result<TerminationReason, String> {
        let mut round = 1;
        loop {
            if let Some(reason) = self.round(run, round)? {
                return Ok(reason);
            }
            round += 1;
        }
    }

    fn analyze(&self, run: &mut Run<'_>, round: u32) -> Result<AnalyzerOutput, String> {
        let user_prompt = run.state.user_prompt.clone();
        let best = match run.global_best() {
            None => None,
            Some(gb) => {
                let record = run.state.round(gb.id().round).expect("global best has a round");
                Some(BestContext {
                    prompt: run.prompt_of(gb.id()),
                    image: self.images.get(&gb.output).map_err(|e| e.to_string())?,
                    feedback: record.verifier.clone().expect("completed rounds are verified"),
                })
            }
        };
        let reference = run.state.rounds.last().and_then(|prev| {
            (Some(prev.round_best) != run.state.global_best).then(|| ReferenceContext {
                prompt: run.prompt_of(prev.round_best),
                feedback: prev.verifier.clone().expect("completed rounds are verified"),
            })
        });
        let input = AnalyzeInput { user_prompt: &user_prompt, round, global_best: best.as_ref(), prev_round_best: reference.as_ref() };
        let (res, rec) = self.agents.analyze(&input);
        run.agent_call(round, res, rec)
    }

    /// One round. Returns the termination reason if the run stops here.
    fn round(&self, run: &mut Run<'_>, round: u32) -> Result<Option<TerminationReason>, String> {
        let config = &self.config;
        let phase = if round <= config.k_min { "early" } else { "late" };
        run.emit(EventKind::RoundStart, Some(round), json!({"phase": phase}))?;
        let calls_before = run.state.total_agent_calls;

        let analysis = self.analyze(run, round)?;
        if let Some(reason) = stop_after_analysis(round, analysis.decision, config) {
            return Ok(Some(reason));
        }

        let user_prompt = run.state.user_prompt.clone();
        let (current_prompt, parent) = match run.global_best() {
            Some(gb) => (run.prompt_of(gb.id()), Some(gb.output.clone())),
            None => (user_prompt.clone(), None),
        };
        let parent_bytes = parent.as_ref().map(|p| self.images.get(p)).transpose().map_err(|e| e.to_string())?;
        let checklist = &analysis.checklist;
        let mut unsatisfied: Vec<String> = checklist.unsatisfied_texts().into_iter().map(String::from).collect();
        if unsatisfied.is_empty() {
            unsatisfied = checklist.requirements.iter().map(|r| r.text.clone()).collect();
        }
        let rewrite_input = RewriteInput {
            user_prompt: &user_prompt,
            current_prompt: &current_prompt,
            best_image: parent_bytes.as_deref().map(Vec::as_slice),
            analyzer_reasoning: &analysis.reasoning,
            satisfied: checklist.satisfied_texts().into_iter().map(String::from).collect(),
            unsatisfied,
        };

        let mut plan = schedule_actions(round, config);
        let mut notes: Vec<String> = Vec::new();
        let needs_rewrite = |plan: &crate::refinement::ActionPlan| plan.count(CandidateKind::Rewrite) > 0;
        let mut gen_rewrite = None;
        if needs_rewrite(&plan) {
            let (res, rec) = self.agents.rewrite_generation(&rewrite_input);
            gen_rewrite = Some(run.agent_call(round, res, rec)?);
        }
        let mut edit_rewrite = None;
        if plan.has_edits() {
            if parent.is_none() {
                notes.push("no parent image; edit slots become rewrites".into());
                plan = plan.without_edits();
            } else {
                let (res, rec) = self.agents.rewrite_editing(&rewrite_input);
                match run.agent_call(round, res, rec) {
                    Ok(e) => edit_rewrite = Some(e),
                    Err(e) => {
                        notes.push(format!("edit rewriter failed ({e}); edit slots become rewrites"));
                        plan = plan.without_edits();
                    }
                }
            }
        }
        if gen_rewrite.is_none() && needs_rewrite(&plan) {
            let (res, rec) = self.agents.rewrite_generation(&rewrite_input);
            gen_rewrite = Some(run.agent_call(round, res, rec)?);
        }

        let population = build_population(
            &plan,
            &PopulationInputs {
                user_prompt: &user_prompt,
                run_seed: config.run_seed,
                parent_image: parent.as_ref(),
                gen_rewrite: gen_rewrite.as_ref(),
                edit_rewrite: edit_rewrite.as_ref(),
            },
        )
        .map_err(|e| e.to_string())?;
        let candidates = population.candidates;
        for c in &candidates {
            let prompt = if c.kind.is_edit() { current_prompt.clone() } else { c.prompt.clone() };
            run.prompts.insert(c.id(), prompt);
        }
        run.emit(
            EventKind::PopulationBuilt,
            Some(round),
            json!({"plan": plan.counts, "candidates": candidates, "notes": notes}),
        )?;

        let samples = candidates.len() as u32;
        run.state.total_samples += samples;
        let executions = match execute_population(&candidates, config, &self.backends, &self.images) {
            Ok(results) => results,
            Err(ExecutionError::AllFailed { results, .. }) => {
                for r in &results {
                    run.emit(EventKind::CandidateExecuted, Some(round), json!(r))?;
                }
                return Err(format!("all {} candidates of round {round} failed", results.len()));
            }
            Err(e) => return Err(e.to_string()),
        };
        for r in &executions {
            run.emit(EventKind::CandidateExecuted, Some(round), json!(r))?;
        }

        let ScoreOutcome { scored, excluded } =
            score_candidates(&executions, &candidates, &user_prompt, &*self.backends.scorer, &self.images);
        let scores: Vec<Value> = scored.iter().map(|s| json!({"candidate": s.id(), "fitness": s.fitness})).collect();
        let excl: Vec<Value> = excluded.iter().map(|(id, note)| json!({"candidate": id, "note": note})).collect();
        run.emit(EventKind::CandidatesScored, Some(round), json!({"scores": scores, "excluded": excl}))?;

        let prior = run.global_best().cloned();
        let (round_best, global_best) = select_bests(&scored, prior.as_ref())
            .ok_or_else(|| format!("no candidate of round {round} could be scored"))?;
        let rb = scored.iter().find(|s| s.id() == round_best).expect("round best is scored").clone();
        let gb_fitness = if global_best == round_best { rb.fitness } else { prior.as_ref().map_or(rb.fitness, |p| p.fitness) };
        run.emit(
            EventKind::RoundBestSelected,
            Some(round),
            json!({"round_best": round_best, "fitness": rb.fitness, "global_best": global_best, "global_fitness": gb_fitness}),
        )?;

        let rb_bytes = self.images.get(&rb.output).map_err(|e| e.to_string())?;
        let grounding = acquire_grounding(&*self.backends.grounding, &rb_bytes, config.enable_grounding_tools);
        run.emit(
            EventKind::GroundingAcquired,
            Some(round),
            json!({"candidate": round_best, "evidence": grounding.evidence, "notes": grounding.notes}),
        )?;

        let (res, rec) = self.agents.verify(&rb_bytes, grounding.evidence.as_ref(), &checklist.questions);
        let verified = run.agent_call(round, res, rec)?;
        run.emit(
            EventKind::VerifierResult,
            Some(round),
            json!({"candidate": round_best, "output": verified.output, "grounded": verified.grounded, "notes": verified.notes}),
        )?;

        let all_satisfied = verified.output.all_satisfied;
        let agent_calls = run.state.total_agent_calls - calls_before;
        run.state.rounds.push(RoundRecord {
            round,
            analyzer: analysis,
            gen_rewrite,
            edit_rewrite: population.edit_rewrite,
            candidates,
            executions,
            scored,
            round_best,
            evidence: grounding.evidence,
            verifier: Some(verified.output),
            agent_calls,
            samples,
        });
        run.state.global_best = Some(global_best);
        run.emit(
            EventKind::RoundEnd,
            Some(round),
            json!({
                "agent_calls": agent_calls,
                "samples": samples,
                "total_agent_calls": run.state.total_agent_calls,
                "total_samples": run.state.total_samples,
            }),
        )?;
        Ok(stop_after_verification(round, all_satisfied, config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageStore;
    use crate::model::{CandidateKind, ImageRef};

    fn scored(round: u32, slot: u32, fitness: f64) -> ScoredCandidate {
        ScoredCandidate {
            candidate: Candidate { round, slot, seed: 0, prompt: String::new(), reference: None, kind: CandidateKind::Resample },
            output: ImageRef { content_id: format!("{round}-{slot}"), width: 1, height: 1, media_type: "image/png".into() },
            fitness,
        }
    }

    fn id(round: u32, slot: u32) -> CandidateId {
        CandidateId { round, slot }
    }

    #[test]
    fn first_maximum_wins() {
        let s = vec![scored(1, 0, 0.8), scored(1, 1, 0.9), scored(1, 2, 0.9)];
        assert_eq!(select_bests(&s, None), Some((id(1, 1), id(1, 1))));
        let singleton = vec![scored(1, 0, 0.1)];
        assert_eq!(select_bests(&singleton, None), Some((id(1, 0), id(1, 0))));
        assert_eq!(select_bests(&[], None), None);
    }

    #[test]
    fn prior_global_best_kept_on_lower_or_equal() {
        let prior = scored(1, 3, 0.7);
        assert_eq!(select_bests(&[scored(2, 0, 0.6)], Some(&prior)), Some((id(2, 0), id(1, 3))));
        assert_eq!(select_bests(&[scored(2, 0, 0.7)], Some(&prior)), Some((id(2, 0), id(1, 3))));
        assert_eq!(select_bests(&[scored(2, 0, 0.71)], Some(&prior)), Some((id(2, 0), id(2, 0))));
    }

    #[test]
    fn selection_ignores_input_order() {
        let s = vec![scored(1, 2, 0.9), scored(1, 1, 0.9)];
        assert_eq!(select_bests(&s, None), Some((id(1, 1), id(1, 1))));
    }

    #[test]
    fn stop_rules() {
        let c = RunConfig::default();
        assert_eq!(decide_stop(1, AnalyzerDecision::End, None, &c), None);
        assert_eq!(
            decide_stop(2, AnalyzerDecision::End, None, &c).map(|r| r.kind),
            Some(TerminationKind::AnalyzerEnd)
        );
        assert_eq!(
            decide_stop(2, AnalyzerDecision::Continue, Some(true), &c).map(|r| r.kind),
            Some(TerminationKind::VerifierAllSatisfied)
        );
        assert_eq!(decide_stop(1, AnalyzerDecision::Continue, Some(true), &c), None);
        assert_eq!(
            decide_stop(4, AnalyzerDecision::Continue, Some(false), &c).map(|r| r.kind),
            Some(TerminationKind::MaxRounds)
        );
        assert_eq!(decide_stop(3, AnalyzerDecision::Continue, Some(false), &c), None);
    }

    #[test]
    fn forced_rounds_ignore_adaptive_stops() {
        let c = RunConfig { force_rounds: Some(3), ..RunConfig::default() };
        assert_eq!(decide_stop(3, AnalyzerDecision::End, None, &c), None);
        assert_eq!(decide_stop(2, AnalyzerDecision::Continue, Some(true), &c), None);
        assert_eq!(
            decide_stop(3, AnalyzerDecision::Continue, Some(false), &c),
            Some(TerminationReason { kind: TerminationKind::MaxRounds, round: 3 })
        );
    }

    struct FlakyScorer;
    impl Scorer for FlakyScorer {
        fn score(&self, image: &[u8], prompt: &str) -> Result<f64, crate::backend::BackendError> {
            assert_eq!(prompt, "user prompt");
            let bits = crate::sim::SimImage::decode_png(image).unwrap();
            match bits.popcount() {
                3 => Err(crate::backend::BackendError::Transport("down".into())),
                2 => Ok(f64::NAN),
                n => Ok(n as f64),
            }
        }
    }

    #[test]
    fn scorer_failures_are_excluded() {
        let images = ImageStore::new();
        let mut candidates = Vec::new();
        let mut results = Vec::new();
        for (slot, n) in [1usize, 3, 2, 0].into_iter().enumerate() {
            let mut bits = vec![false; 4];
            bits[..n].iter_mut().for_each(|b| *b = true);
            let img = images.put_png(crate::sim::SimImage { bits }.encode_png()).unwrap();
            let c = Candidate { round: 1, slot: slot as u32, seed: 0, prompt: "rewritten".into(), reference: None, kind: CandidateKind::Rewrite };
            results.push(ExecutionResult { candidate: c.id(), output: crate::model::ExecutionOutput::Image(img), duration: Default::default() });
            candidates.push(c);
        }
        let out = score_candidates(&results, &candidates, "user prompt", &FlakyScorer, &images);
        assert_eq!(out.scored.iter().map(|s| s.id().slot).collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(out.excluded.len(), 2);
        assert_eq!(select_bests(&out.scored, None), Some((id(1, 0), id(1, 0))));
    }
}
