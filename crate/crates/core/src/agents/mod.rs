//! Agent requests and validated replies. Invalid replies are re-asked a
//! bounded number of times.

pub mod wire;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend};
use crate::grounding::serialize_evidence;
use crate::model::{
    classify_major, enforce_verifier_consistency, validate_checklist, AnalyzerDecision,
    AnalyzerOutput, Answer, BinaryQuestion, EditRewriteOutput, GenRewriteOutput,
    GroundingEvidence, Requirement, RequirementChecklist, SchemaViolation, VerificationTriplet,
    VerifierOutput,
};
use wire::{
    AnalyzerReply, EditRewriterReply, GenRewriterReply, VerifierReply, MODEL_CHOICE_CONTINUE,
    MODEL_CHOICE_ENDING,
};

pub const ANALYZER_PROMPT: &str = include_str!("../../prompts/analyzer.txt");
pub const GEN_REWRITER_PROMPT: &str = include_str!("../../prompts/gen_rewriter.txt");
pub const EDIT_REWRITER_PROMPT: &str = include_str!("../../prompts/edit_rewriter.txt");
pub const VERIFIER_PROMPT: &str = include_str!("../../prompts/verifier.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Analyzer,
    GenRewriter,
    EditRewriter,
    Verifier,
}

impl AgentRole {
    pub const ALL: [AgentRole; 4] =
        [Self::Analyzer, Self::GenRewriter, Self::EditRewriter, Self::Verifier];

    pub fn system_prompt(self) -> &'static str {
        match self {
            Self::Analyzer => ANALYZER_PROMPT,
            Self::GenRewriter => GEN_REWRITER_PROMPT,
            Self::EditRewriter => EDIT_REWRITER_PROMPT,
            Self::Verifier => VERIFIER_PROMPT,
        }
    }

    /// Name of the response schema sent in the structured-output directive.
    pub fn schema_id(self) -> &'static str {
        match self {
            Self::Analyzer => "analyzer_output",
            Self::GenRewriter => "generation_rewriter_output",
            Self::EditRewriter => "editing_rewriter_output",
            Self::Verifier => "verifier_output",
        }
    }

    pub fn schema(self) -> Value {
        match self {
            Self::Analyzer => wire::analyzer_schema(),
            Self::GenRewriter => wire::gen_rewriter_schema(),
            Self::EditRewriter => wire::edit_rewriter_schema(),
            Self::Verifier => wire::verifier_schema(),
        }
    }

    pub fn from_schema_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.schema_id() == id)
    }

    pub fn from_system_prompt(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.system_prompt() == text)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Analyzer => "analyzer",
            Self::GenRewriter => "gen_rewriter",
            Self::EditRewriter => "edit_rewriter",
            Self::Verifier => "verifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image { media_type: String, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_parts: Vec<Part>,
    pub response_schema_id: AgentRole,
}

#[derive(Debug, Error)]
#[error("malformed chat request: {0}")]
pub struct WireError(String);

impl ChatRequest {
    pub fn new(role: AgentRole, user_parts: Vec<Part>) -> Self {
        Self {
            system_text: role.system_prompt().to_string(),
            user_parts,
            response_schema_id: role,
        }
    }

    pub fn role(&self) -> AgentRole {
        self.response_schema_id
    }

    /// All text parts joined by newlines.
    pub fn text(&self) -> String {
        self.user_parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &[u8]> {
        self.user_parts.iter().filter_map(|p| match p {
            Part::Image { data, .. } => Some(data.as_slice()),
            Part::Text(_) => None,
        })
    }

    /// Chat-completions request body.
    pub fn to_wire(&self, model: &str) -> Value {
        let content: Vec<Value> = self
            .user_parts
            .iter()
            .map(|p| match p {
                Part::Text(t) => json!({"type": "text", "text": t}),
                Part::Image { media_type, data } => json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:{media_type};base64,{}", B64.encode(data))}
                }),
            })
            .collect();
        let role = self.response_schema_id;
        json!({
            "model": model,
            "messages": [
                {"role": "system", "content": [{"type": "text", "text": self.system_text}]},
                {"role": "user", "content": content}
            ],
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": role.schema_id(), "strict": true, "schema": role.schema()}
            }
        })
    }

    /// Inverse of [`ChatRequest::to_wire`], for stand-in servers.
    pub fn from_wire(body: &Value) -> Result<Self, WireError> {
        let err = |m: &str| WireError(m.to_string());
        let schema_id = body
            .pointer("/response_format/json_schema/name")
            .and_then(Value::as_str)
            .ok_or_else(|| err("missing response_format.json_schema.name"))?;
        let role = AgentRole::from_schema_id(schema_id).ok_or_else(|| err("unknown schema name"))?;
        let messages = body["messages"].as_array().ok_or_else(|| err("missing messages"))?;
        let mut system_text = String::new();
        let mut user_parts = Vec::new();
        for m in messages {
            let parts = m["content"].as_array().ok_or_else(|| err("content must be an array"))?;
            match m["role"].as_str() {
                Some("system") => {
                    for p in parts {
                        system_text.push_str(p["text"].as_str().unwrap_or_default());
                    }
                }
                Some("user") => {
                    for p in parts {
                        match p["type"].as_str() {
                            Some("text") => user_parts
                                .push(Part::Text(p["text"].as_str().unwrap_or_default().to_string())),
                            Some("image_url") => {
                                let url = p.pointer("/image_url/url").and_then(Value::as_str).ok_or_else(|| err("image part without url"))?;
                                let rest = url.strip_prefix("data:").ok_or_else(|| err("image url is not a data url"))?;
                                let (media_type, b64) = rest.split_once(";base64,").ok_or_else(|| err("image url is not base64"))?;
                                let data = B64.decode(b64).map_err(|e| WireError(e.to_string()))?;
                                user_parts.push(Part::Image { media_type: media_type.to_string(), data });
                            }
                            _ => return Err(err("unknown content part type")),
                        }
                    }
                }
                _ => return Err(err("unexpected message role")),
            }
        }
        Ok(Self { system_text, user_parts, response_schema_id: role })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentOutcome {
    Output(Value),
    Error(String),
}

/// One logical agent invocation, however many attempts it took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCallRecord {
    pub role: AgentRole,
    pub attempts: u32,
    pub outcome: AgentOutcome,
    /// Violations that triggered re-asks, in order.
    pub violations: Vec<String>,
    #[serde(skip)]
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("{role:?} agent transport failure: {source}")]
    Transport { role: AgentRole, source: BackendError },
    #[error("{role:?} agent reply invalid after {attempts} attempts: {last}")]
    Schema { role: AgentRole, attempts: u32, last: String },
}

enum Violation {
    Schema(String),
    /// Rewritten prompt repeated the current one; re-asked at most once.
    Repeat(String),
}

impl From<SchemaViolation> for Violation {
    fn from(v: SchemaViolation) -> Self {
        Violation::Schema(v.0)
    }
}

/// Image plus the verification feedback it received.
#[derive(Debug, Clone)]
pub struct BestContext {
    pub prompt: String,
    pub image: Arc<Vec<u8>>,
    pub feedback: VerifierOutput,
}

/// Previous round-best extras, sent only when it differs from the global best.
#[derive(Debug, Clone)]
pub struct ReferenceContext {
    pub prompt: String,
    pub feedback: VerifierOutput,
}

#[derive(Debug, Clone)]
pub struct AnalyzeInput<'a> {
    pub user_prompt: &'a str,
    pub round: u32,
    pub global_best: Option<&'a BestContext>,
    pub prev_round_best: Option<&'a ReferenceContext>,
}

#[derive(Debug, Clone)]
pub struct RewriteInput<'a> {
    pub user_prompt: &'a str,
    pub current_prompt: &'a str,
    pub best_image: Option<&'a [u8]>,
    pub analyzer_reasoning: &'a str,
    pub satisfied: Vec<String>,
    pub unsatisfied: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub output: VerifierOutput,
    pub grounded: bool,
    pub notes: Vec<String>,
}

/// Feedback document passed back to the analyzer; same field names as the
/// verifier reply.
pub fn feedback_json(v: &VerifierOutput) -> Value {
    let qae: Vec<Value> = v
        .triplets
        .iter()
        .map(|t| json!([t.question, answer_token(t.answer), t.explanation]))
        .collect();
    json!({
        "questions_answers_and_explanations": qae,
        "verifier_summary": v.summary,
        "all_satisfied": v.all_satisfied,
    })
}

fn answer_token(a: Answer) -> &'static str {
    match a {
        Answer::Yes => "Yes",
        Answer::No => "No",
    }
}

fn png_part(data: &[u8]) -> Part {
    Part::Image { media_type: crate::image::PNG_MEDIA_TYPE.to_string(), data: data.to_vec() }
}

pub fn render_analyzer(input: &AnalyzeInput<'_>) -> ChatRequest {
    let current_prompt = input.global_best.map_or(input.user_prompt, |b| b.prompt.as_str());
    let mut parts = vec![
        Part::Text(format!("original_prompt: {}", input.user_prompt)),
        Part::Text(format!("current_prompt: {current_prompt}")),
        Part::Text(format!("current_round: {}", input.round)),
    ];
    if let Some(best) = input.global_best {
        parts.push(Part::Text("current_image:".to_string()));
        parts.push(png_part(&best.image));
        parts.push(Part::Text(format!("current_verifier_output: {}", feedback_json(&best.feedback))));
    }
    if let Some(reference) = input.prev_round_best {
        parts.push(Part::Text(format!("reference_prompt: {}", reference.prompt)));
        parts.push(Part::Text(format!(
            "reference_verifier_output: {}",
            feedback_json(&reference.feedback)
        )));
    }
    ChatRequest::new(AgentRole::Analyzer, parts)
}

fn render_rewriter(role: AgentRole, input: &RewriteInput<'_>) -> ChatRequest {
    let analyzer_output = json!({
        "analyzer_reasoning": input.analyzer_reasoning,
        "current_prompt": input.current_prompt,
        "satisfied_requirements": input.satisfied,
        "unsatisfied_requirements": input.unsatisfied,
    });
    let mut parts = vec![
        Part::Text(format!("original_prompt: {}", input.user_prompt)),
        Part::Text(format!("analyzer_output: {analyzer_output}")),
    ];
    if let Some(img) = input.best_image {
        parts.push(Part::Text("current_image:".to_string()));
        parts.push(png_part(img));
    }
    ChatRequest::new(role, parts)
}

pub fn render_gen_rewriter(input: &RewriteInput<'_>) -> ChatRequest {
    render_rewriter(AgentRole::GenRewriter, input)
}

pub fn render_edit_rewriter(input: &RewriteInput<'_>) -> ChatRequest {
    render_rewriter(AgentRole::EditRewriter, input)
}

pub fn render_verifier(
    image: &[u8],
    evidence: Option<&GroundingEvidence>,
    questions: &[BinaryQuestion],
) -> ChatRequest {
    let qs: Vec<&str> = questions.iter().map(|q| q.text.as_str()).collect();
    let mut parts = vec![
        Part::Text(format!("binary_questions: {}", json!(qs))),
        Part::Text("current_image:".to_string()),
        png_part(image),
    ];
    if let Some(e) = evidence {
        parts.push(Part::Text(serialize_evidence(e)));
    }
    ChatRequest::new(AgentRole::Verifier, parts)
}

fn parse_doc<T: for<'de> Deserialize<'de>>(reply: &str) -> Result<T, Violation> {
    serde_json::from_str(wire::extract_json(reply))
        .map_err(|e| Violation::Schema(format!("reply is not a valid document: {e}")))
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn nonempty_items(field: &str, items: &[String]) -> Result<Vec<String>, Violation> {
    if items.is_empty() {
        return Err(Violation::Schema(format!("{field} is empty")));
    }
    items
        .iter()
        .map(|s| {
            let t = s.trim();
            if t.is_empty() {
                Err(Violation::Schema(format!("{field} contains an empty item")))
            } else {
                Ok(t.to_string())
            }
        })
        .collect()
}

fn parse_analyzer(reply: &str, round: u32) -> Result<AnalyzerOutput, Violation> {
    let doc: AnalyzerReply = parse_doc(reply)?;
    let texts = nonempty_items("requirements_analysis", &doc.requirements_analysis)?;
    let requirements: Vec<Requirement> = texts
        .iter()
        .enumerate()
        .map(|(index, text)| Requirement { index, text: text.clone(), major: classify_major(text) })
        .collect();
    let questions: Vec<BinaryQuestion> = doc
        .binary_questions
        .iter()
        .enumerate()
        .map(|(index, q)| BinaryQuestion { index, text: q.trim().to_string() })
        .collect();
    let lookup = |field: &str, item: &str| -> Result<usize, Violation> {
        let key = normalize(item);
        requirements
            .iter()
            .find(|r| normalize(&r.text) == key)
            .map(|r| r.index)
            .ok_or_else(|| {
                Violation::Schema(format!("{field} item {item:?} is not in requirements_analysis"))
            })
    };
    let satisfied: BTreeSet<usize> = doc
        .satisfied_requirements
        .iter()
        .map(|s| lookup("satisfied_requirements", s))
        .collect::<Result<_, _>>()?;
    let listed_unsatisfied: BTreeSet<usize> = doc
        .unsatisfied_requirements
        .iter()
        .map(|s| lookup("unsatisfied_requirements", s))
        .collect::<Result<_, _>>()?;
    if let Some(i) = satisfied.intersection(&listed_unsatisfied).next() {
        return Err(Violation::Schema(format!(
            "requirement {:?} listed as both satisfied and unsatisfied",
            requirements[*i].text
        )));
    }
    // unclassified requirements count as unsatisfied
    let unsatisfied = (0..requirements.len()).filter(|i| !satisfied.contains(i)).collect();
    let checklist = validate_checklist(
        RequirementChecklist { requirements, questions, satisfied, unsatisfied },
        round,
    )?;
    let decision = match doc.model_choice.trim() {
        MODEL_CHOICE_CONTINUE => AnalyzerDecision::Continue,
        MODEL_CHOICE_ENDING => AnalyzerDecision::End,
        other => {
            return Err(Violation::Schema(format!(
                "model_choice must be \"continue\" or \"ending\", got {other:?}"
            )))
        }
    };
    if round == 1 && decision == AnalyzerDecision::End {
        return Err(Violation::Schema("model_choice cannot be \"ending\" in the first round".into()));
    }
    Ok(AnalyzerOutput {
        reasoning: doc.analyzer_reasoning,
        original_prompt_echo: doc.original_prompt,
        current_prompt_echo: doc.current_prompt,
        checklist,
        decision,
    })
}

fn parse_gen_rewrite(reply: &str, current_prompt: &str) -> Result<GenRewriteOutput, Violation> {
    let doc: GenRewriterReply = parse_doc(reply)?;
    let planned_adjustments = nonempty_items("planned_adjustments", &doc.planned_adjustments)?;
    let adjusted = doc.adjusted_prompt.trim().to_string();
    if adjusted.is_empty() {
        return Err(Violation::Schema("adjusted_prompt is empty".into()));
    }
    if adjusted == current_prompt.trim() {
        return Err(Violation::Repeat("adjusted_prompt is identical to current_prompt".into()));
    }
    Ok(GenRewriteOutput {
        reasoning: doc.rewriter_reasoning,
        planned_adjustments,
        adjusted_prompt: adjusted,
    })
}

fn parse_edit_rewrite(reply: &str) -> Result<EditRewriteOutput, Violation> {
    let doc: EditRewriterReply = parse_doc(reply)?;
    let planned_edits = nonempty_items("planned_edits", &doc.planned_edits)?;
    let top = doc.single_editing_prompt.trim().to_string();
    if top.is_empty() {
        return Err(Violation::Schema("single_editing_prompt is empty".into()));
    }
    let comp = doc.comprehensive_editing_prompt.trim().to_string();
    if comp.is_empty() {
        return Err(Violation::Schema("comprehensive_editing_prompt is empty".into()));
    }
    Ok(EditRewriteOutput {
        reasoning: doc.rewriter_reasoning,
        planned_edits,
        top_edit: top,
        comprehensive_edit: comp,
        random_edit: None,
    })
}

fn parse_verifier(
    reply: &str,
    questions: &[BinaryQuestion],
) -> Result<(VerifierOutput, Vec<String>), Violation> {
    let doc: VerifierReply = parse_doc(reply)?;
    let qae = &doc.questions_answers_and_explanations;
    if qae.len() != questions.len() {
        return Err(Violation::Schema(format!(
            "questions_answers_and_explanations has {} entries for {} questions",
            qae.len(),
            questions.len()
        )));
    }
    let mut notes = Vec::new();
    let mut triplets = Vec::with_capacity(qae.len());
    for ((q, a, e), expected) in qae.iter().zip(questions) {
        let answer = match a.trim().to_ascii_lowercase().as_str() {
            "yes" => Answer::Yes,
            "no" => Answer::No,
            other => {
                return Err(Violation::Schema(format!("answer must be Yes or No, got {other:?}")))
            }
        };
        if normalize(q) != normalize(&expected.text) {
            notes.push(format!(
                "verifier restated question {} as {q:?}; aligned by position",
                expected.index
            ));
        }
        triplets.push(VerificationTriplet {
            question: expected.text.clone(),
            answer,
            explanation: e.clone(),
        });
    }
    let raw = VerifierOutput {
        reasoning: doc.verifier_reasoning,
        image_caption: doc.current_image_caption,
        triplets,
        summary: doc.verifier_summary,
        all_satisfied: doc.all_satisfied,
    };
    let (output, note) = enforce_verifier_consistency(raw);
    notes.extend(note);
    Ok((output, notes))
}

/// Issues agent calls against a chat backend.
#[derive(Clone)]
pub struct AgentClient {
    chat: Arc<dyn ChatBackend>,
    retries: u32,
}

impl AgentClient {
    pub fn new(chat: Arc<dyn ChatBackend>, retries: u32) -> Self {
        Self { chat, retries }
    }

    fn call<T: Serialize>(
        &self,
        mut request: ChatRequest,
        parse: impl Fn(&str) -> Result<T, Violation>,
    ) -> (Result<T, AgentError>, AgentCallRecord) {
        let role = request.role();
        let started = Instant::now();
        let mut violations = Vec::new();
        let mut repeats = 0u32;
        let mut attempts = 0u32;
        let result = loop {
            attempts += 1;
            let reply = match self.chat.complete(&request) {
                Ok(r) => r,
                Err(source) => break Err(AgentError::Transport { role, source }),
            };
            let (msg, correction) = match parse(&reply) {
                Ok(v) => break Ok(v),
                Err(Violation::Schema(m)) => {
                    let c = format!(
                        "Your previous reply was rejected: {m}. Reply again with a single JSON document matching the required schema."
                    );
                    (m, c)
                }
                Err(Violation::Repeat(m)) => {
                    repeats += 1;
                    if repeats > 1 {
                        violations.push(m.clone());
                        break Err(AgentError::Schema { role, attempts, last: m });
                    }
                    let c = "Reminder: the adjusted_prompt must be significantly different from the current_prompt.".to_string();
                    (m, c)
                }
            };
            violations.push(msg.clone());
            if attempts > self.retries {
                break Err(AgentError::Schema { role, attempts, last: msg });
            }
            request.user_parts.push(Part::Text(correction));
        };
        let outcome = match &result {
            Ok(v) => AgentOutcome::Output(serde_json::to_value(v).unwrap_or(Value::Null)),
            Err(e) => AgentOutcome::Error(e.to_string()),
        };
        let record = AgentCallRecord { role, attempts, outcome, violations, latency: started.elapsed() };
        (result, record)
    }

    pub fn analyze(
        &self,
        input: &AnalyzeInput<'_>,
    ) -> (Result<AnalyzerOutput, AgentError>, AgentCallRecord) {
        let round = input.round;
        self.call(render_analyzer(input), |reply| parse_analyzer(reply, round))
    }

    pub fn rewrite_generation(
        &self,
        input: &RewriteInput<'_>,
    ) -> (Result<GenRewriteOutput, AgentError>, AgentCallRecord) {
        let current = input.current_prompt.to_string();
        self.call(render_gen_rewriter(input), move |reply| parse_gen_rewrite(reply, &current))
    }

    pub fn rewrite_editing(
        &self,
        input: &RewriteInput<'_>,
    ) -> (Result<EditRewriteOutput, AgentError>, AgentCallRecord) {
        self.call(render_edit_rewriter(input), parse_edit_rewrite)
    }

    /// Verifies the round-best image. Without evidence the request carries no
    /// grounding block and the outcome is marked ungrounded.
    pub fn verify(
        &self,
        image: &[u8],
        evidence: Option<&GroundingEvidence>,
        questions: &[BinaryQuestion],
    ) -> (Result<VerifyOutcome, AgentError>, AgentCallRecord) {
        let (res, record) = self.call(render_verifier(image, evidence, questions), |reply| {
            parse_verifier(reply, questions)
        });
        let res = res.map(|(output, mut notes)| {
            if evidence.is_none() {
                notes.push("ungrounded".to_string());
            }
            VerifyOutcome { output, grounded: evidence.is_some(), notes }
        });
        (res, record)
    }
}
