//! Scripted agents over the hidden world. They read the same requests a real
//! chat model would get and answer with well-formed structured replies.

use serde_json::Value;

use super::world::{
    parse_requirement_indices, question_text, requirement_label, requirement_text,
    is_major_requirement, SimImage, Tag, WorldSpec,
};
use crate::agents::wire::{
    AnalyzerReply, EditRewriterReply, GenRewriterReply, VerifierReply, MODEL_CHOICE_CONTINUE,
    MODEL_CHOICE_ENDING,
};
use crate::agents::{AgentRole, ChatRequest, Part};
use crate::backend::{BackendError, ChatBackend};
use crate::hashing::hash_bytes;

pub struct SimAgents {
    pub world: WorldSpec,
    /// The analyzer only says "ending" once the image it judges comes from
    /// a round at or past this floor.
    pub k_min: u32,
}

fn text_field<'a>(req: &'a ChatRequest, key: &str) -> Option<&'a str> {
    req.user_parts.iter().find_map(|p| match p {
        Part::Text(t) => t.strip_prefix(key),
        Part::Image { .. } => None,
    })
}

fn required<'a>(req: &'a ChatRequest, key: &str) -> Result<&'a str, BackendError> {
    text_field(req, key).ok_or_else(|| BackendError::Rejected(format!("request has no {key:?} part")))
}

fn attached_image(req: &ChatRequest) -> Result<Option<SimImage>, BackendError> {
    req.images()
        .next()
        .map(|bytes| SimImage::decode_png(bytes).map_err(BackendError::Rejected))
        .transpose()
}

fn to_reply<T: serde::Serialize>(doc: &T) -> Result<String, BackendError> {
    serde_json::to_string(doc).map_err(|e| BackendError::Malformed(e.to_string()))
}

impl SimAgents {
    pub fn new(world: WorldSpec, k_min: u32) -> Self {
        Self { world, k_min }
    }

    fn analyze(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let original = required(req, "original_prompt: ")?;
        let current = required(req, "current_prompt: ")?;
        let round: u32 = required(req, "current_round: ")?
            .trim()
            .parse()
            .map_err(|_| BackendError::Rejected("current_round is not a number".into()))?;
        let image = attached_image(req)?;
        let ks: Vec<usize> = (1..=self.world.surfaced()).collect();
        let holds = |k: usize| image.as_ref().is_some_and(|img| img.satisfies(k));
        let (sat, unsat): (Vec<usize>, Vec<usize>) = ks.iter().partition(|&&k| holds(k));
        let majors_met = ks.iter().filter(|&&k| is_major_requirement(k)).all(|&k| holds(k));
        let ending = image.is_some() && majors_met && round > self.k_min;
        to_reply(&AnalyzerReply {
            analyzer_reasoning: format!("{} of {} surfaced requirements hold", sat.len(), ks.len()),
            original_prompt: original.to_string(),
            current_prompt: current.to_string(),
            requirements_analysis: ks.iter().map(|&k| requirement_text(k)).collect(),
            satisfied_requirements: sat.iter().map(|&k| requirement_text(k)).collect(),
            unsatisfied_requirements: unsat.iter().map(|&k| requirement_text(k)).collect(),
            binary_questions: ks.iter().map(|&k| question_text(k)).collect(),
            model_choice: if ending { MODEL_CHOICE_ENDING } else { MODEL_CHOICE_CONTINUE }.to_string(),
        })
    }

    /// (original prompt, current prompt, unsatisfied indices) from a rewriter
    /// request.
    fn rewriter_context(req: &ChatRequest) -> Result<(String, String, Vec<usize>), BackendError> {
        let original = required(req, "original_prompt: ")?.to_string();
        let doc: Value = serde_json::from_str(required(req, "analyzer_output: ")?)
            .map_err(|e| BackendError::Rejected(format!("analyzer_output is not json: {e}")))?;
        let current = doc["current_prompt"].as_str().unwrap_or(&original).to_string();
        let unsat: Vec<usize> = doc["unsatisfied_requirements"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(Value::as_str)
            .filter_map(|s| parse_requirement_indices(s).first().copied())
            .collect();
        Ok((original, current, unsat))
    }

    fn rewrite_generation(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let (original, current, unsat) = Self::rewriter_context(req)?;
        let labels: Vec<String> = unsat.iter().map(|&k| requirement_label(k)).collect();
        let emphasis = if labels.is_empty() { "all requirements".to_string() } else { labels.join(", ") };
        to_reply(&GenRewriterReply {
            rewriter_reasoning: format!("{} requirements still open", unsat.len()),
            original_prompt: original,
            adjusted_prompt: format!("{current} | emphasize {emphasis}"),
            current_prompt: current,
            planned_adjustments: vec![format!("emphasize {emphasis}")],
        })
    }

    fn rewrite_editing(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let (original, current, mut unsat) = Self::rewriter_context(req)?;
        if unsat.is_empty() {
            unsat = (1..=self.world.surfaced()).collect();
        }
        let planned: Vec<String> = unsat.iter().map(|&k| format!("fix {}", requirement_label(k))).collect();
        let labels: Vec<String> = unsat.iter().map(|&k| requirement_label(k)).collect();
        to_reply(&EditRewriterReply {
            rewriter_reasoning: format!("{} edits planned", planned.len()),
            original_prompt: original,
            current_prompt: current,
            single_editing_prompt: planned[0].clone(),
            comprehensive_editing_prompt: format!("fix {}", labels.join(" and ")),
            planned_edits: planned,
        })
    }

    fn verify(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let questions: Vec<String> = serde_json::from_str(required(req, "binary_questions: ")?)
            .map_err(|e| BackendError::Rejected(format!("binary_questions is not json: {e}")))?;
        let image = attached_image(req)?
            .ok_or_else(|| BackendError::Rejected("verifier request carries no image".into()))?;
        let key = hash_bytes(&image.encode_png());
        let mut qae = Vec::with_capacity(questions.len());
        for q in &questions {
            let k = parse_requirement_indices(q)
                .first()
                .copied()
                .ok_or_else(|| BackendError::Rejected(format!("question {q:?} names no requirement")))?;
            let flipped = self.world.draw(Tag::VerifierFlip, key, k) < self.world.verifier_flip;
            let yes = image.satisfies(k) != flipped;
            let answer = if yes { "Yes" } else { "No" };
            qae.push((q.clone(), answer.to_string(), format!("{} checked", requirement_label(k))));
        }
        let all_satisfied = qae.iter().all(|(_, a, _)| a == "Yes");
        to_reply(&VerifierReply {
            verifier_reasoning: "checked each question against the image".into(),
            current_image_caption: format!("simulated image with {} requirements satisfied", image.popcount()),
            questions_answers_and_explanations: qae,
            verifier_summary: if all_satisfied { "all satisfied" } else { "some requirements missing" }.into(),
            all_satisfied,
        })
    }
}

impl ChatBackend for SimAgents {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        match req.role() {
            AgentRole::Analyzer => self.analyze(req),
            AgentRole::GenRewriter => self.rewrite_generation(req),
            AgentRole::EditRewriter => self.rewrite_editing(req),
            AgentRole::Verifier => self.verify(req),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentClient, AnalyzeInput, BestContext, RewriteInput};
    use crate::model::{AnalyzerDecision, VerifierOutput};
    use std::sync::Arc;

    fn agents(world: WorldSpec) -> AgentClient {
        AgentClient::new(Arc::new(SimAgents::new(world, 2)), 0)
    }

    fn feedback() -> VerifierOutput {
        VerifierOutput {
            reasoning: String::new(),
            image_caption: String::new(),
            triplets: vec![],
            summary: String::new(),
            all_satisfied: false,
        }
    }

    fn best(bits: Vec<bool>) -> BestContext {
        BestContext { prompt: "p".into(), image: Arc::new(SimImage { bits }.encode_png()), feedback: feedback() }
    }

    #[test]
    fn first_round_analysis_is_all_unsatisfied() {
        let input = AnalyzeInput { user_prompt: "p", round: 1, global_best: None, prev_round_best: None };
        let (out, rec) = agents(WorldSpec::default()).analyze(&input);
        let out = out.unwrap();
        assert_eq!(rec.attempts, 1);
        assert_eq!(out.checklist.requirements.len(), 6);
        assert!(out.checklist.satisfied.is_empty());
        assert_eq!(out.decision, AnalyzerDecision::Continue);
        let majors: Vec<bool> = out.checklist.requirements.iter().map(|r| r.major).collect();
        assert_eq!(majors, vec![true, false, true, true, false, true]);
    }

    #[test]
    fn ending_waits_past_k_min() {
        let b = best(vec![true, false, true, true, false, true]);
        let client = agents(WorldSpec::default());
        let at = |round| {
            let input = AnalyzeInput { user_prompt: "p", round, global_best: Some(&b), prev_round_best: None };
            client.analyze(&input).0.unwrap().decision
        };
        assert_eq!(at(2), AnalyzerDecision::Continue);
        assert_eq!(at(3), AnalyzerDecision::End);
    }

    #[test]
    fn recall_limits_checklist() {
        let input = AnalyzeInput { user_prompt: "p", round: 1, global_best: None, prev_round_best: None };
        let out = agents(WorldSpec { analyzer_recall: 0.5, ..Default::default() }).analyze(&input).0.unwrap();
        assert_eq!(out.checklist.requirements.len(), 3);
    }

    fn rewrite_input(unsat: Vec<String>) -> RewriteInput<'static> {
        RewriteInput {
            user_prompt: "p",
            current_prompt: "p",
            best_image: None,
            analyzer_reasoning: "",
            satisfied: vec![],
            unsatisfied: unsat,
        }
    }

    #[test]
    fn rewriters_encode_unsatisfied_indices() {
        let client = agents(WorldSpec::default());
        let input = rewrite_input(vec![requirement_text(2), requirement_text(5)]);
        let g = client.rewrite_generation(&input).0.unwrap();
        assert_eq!(g.adjusted_prompt, "p | emphasize req-2, req-5");
        let e = client.rewrite_editing(&input).0.unwrap();
        assert_eq!(e.planned_edits, vec!["fix req-2", "fix req-5"]);
        assert_eq!(e.top_edit, "fix req-2");
        assert_eq!(e.comprehensive_edit, "fix req-2 and req-5");
    }

    #[test]
    fn noiseless_verifier_reads_true_bits() {
        let client = agents(WorldSpec::default());
        let img = SimImage { bits: vec![true, true, false] }.encode_png();
        let qs: Vec<_> = (1..=3)
            .map(|k| crate::model::BinaryQuestion { index: k - 1, text: question_text(k) })
            .collect();
        let out = client.verify(&img, None, &qs).0.unwrap();
        let yes: Vec<bool> = out.output.triplets.iter().map(|t| t.answer == crate::model::Answer::Yes).collect();
        assert_eq!(yes, vec![true, true, false]);
        assert!(!out.output.all_satisfied);
        assert!(!out.grounded);
        let full = SimImage { bits: vec![true; 3] }.encode_png();
        assert!(client.verify(&full, None, &qs).0.unwrap().output.all_satisfied);
    }

    #[test]
    fn always_flipping_verifier_inverts() {
        let client = agents(WorldSpec { verifier_flip: 1.0, ..Default::default() });
        let img = SimImage { bits: vec![true, false] }.encode_png();
        let qs: Vec<_> = (1..=2)
            .map(|k| crate::model::BinaryQuestion { index: k - 1, text: question_text(k) })
            .collect();
        let out = client.verify(&img, None, &qs).0.unwrap();
        let yes: Vec<bool> = out.output.triplets.iter().map(|t| t.answer == crate::model::Answer::Yes).collect();
        assert_eq!(yes, vec![false, true]);
    }
}
