//! Domain types shared by every stage of a run.
//!
//! All values here are immutable once built. The canonical serialized form is
//! the serde JSON encoding with snake_case field names; that encoding is what
//! lands in traces and in the run store.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;

/// Handle to image bytes held in an [`ImageStore`](crate::image::ImageStore).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub content_id: String,
    pub width: u32,
    pub height: u32,
    pub media_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requirement {
    pub index: usize,
    pub text: String,
    pub major: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryQuestion {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementChecklist {
    pub requirements: Vec<Requirement>,
    pub questions: Vec<BinaryQuestion>,
    pub satisfied: BTreeSet<usize>,
    pub unsatisfied: BTreeSet<usize>,
}

impl RequirementChecklist {
    pub fn satisfied_texts(&self) -> Vec<&str> {
        self.texts_of(&self.satisfied)
    }

    pub fn unsatisfied_texts(&self) -> Vec<&str> {
        self.texts_of(&self.unsatisfied)
    }

    fn texts_of(&self, set: &BTreeSet<usize>) -> Vec<&str> {
        self.requirements
            .iter()
            .filter(|r| set.contains(&r.index))
            .map(|r| r.text.as_str())
            .collect()
    }

    /// True when every major requirement sits in the satisfied partition.
    pub fn majors_satisfied(&self) -> bool {
        self.requirements
            .iter()
            .filter(|r| r.major)
            .all(|r| self.satisfied.contains(&r.index))
    }
}

/// A schema violation, naming the first broken invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schema violation: {0}")]
pub struct SchemaViolation(pub String);

impl SchemaViolation {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

/// Checks every checklist invariant. Round 1 additionally requires an empty
/// satisfied partition.
pub fn validate_checklist(
    checklist: RequirementChecklist,
    round: u32,
) -> Result<RequirementChecklist, SchemaViolation> {
    let n = checklist.requirements.len();
    if checklist.questions.len() != n {
        return Err(SchemaViolation::new(format!(
            "question/requirement count mismatch ({} questions, {} requirements)",
            checklist.questions.len(),
            n
        )));
    }
    let mut seen = BTreeSet::new();
    for r in &checklist.requirements {
        if r.text.trim().is_empty() {
            return Err(SchemaViolation::new(format!("requirement {} has empty text", r.index)));
        }
        if !seen.insert(r.index) {
            return Err(SchemaViolation::new(format!("duplicate requirement index {}", r.index)));
        }
    }
    let mut qseen = BTreeSet::new();
    for q in &checklist.questions {
        if q.text.trim().is_empty() {
            return Err(SchemaViolation::new(format!("question {} has empty text", q.index)));
        }
        if !seen.contains(&q.index) || !qseen.insert(q.index) {
            return Err(SchemaViolation::new(format!(
                "question index {} does not match exactly one requirement",
                q.index
            )));
        }
    }
    if let Some(i) = checklist.satisfied.intersection(&checklist.unsatisfied).next() {
        return Err(SchemaViolation::new(format!(
            "requirement {i} is both satisfied and unsatisfied"
        )));
    }
    let union: BTreeSet<usize> = checklist.satisfied.union(&checklist.unsatisfied).copied().collect();
    if union != seen {
        return Err(SchemaViolation::new(
            "satisfied and unsatisfied partitions do not cover exactly the requirement indices",
        ));
    }
    if round == 1 && !checklist.satisfied.is_empty() {
        return Err(SchemaViolation::new(
            "satisfied requirements must be empty in the initial round",
        ));
    }
    Ok(checklist)
}

// Word tokens and phrases. A requirement is major when it mentions any major
// aspect; minor when it only mentions minor aspects; major when it mentions
// neither (subjects rarely carry a keyword).
const MAJOR_WORDS: &[&str] = &[
    "subject", "subjects", "object", "objects", "present", "presence", "appear", "appears",
    "count", "exactly", "number", "one", "two", "three", "four", "five", "six", "seven",
    "eight", "nine", "ten", "single", "pair", "attribute", "attributes", "material", "size",
    "shape", "color", "colour", "colored", "coloured", "red", "orange", "yellow", "green",
    "blue", "purple", "pink", "brown", "black", "white", "gray", "grey", "above", "below",
    "under", "beneath", "over", "left", "right", "behind", "beside", "between", "inside",
    "spatial", "position", "positioned", "text", "sign", "signage", "written", "word",
    "words", "letter", "letters", "reads", "typography", "label", "action", "holding",
];
const MAJOR_PHRASES: &[&str] = &["on top of", "next to", "in front of"];
const MINOR_WORDS: &[&str] = &[
    "lighting", "light", "lit", "illumination", "illuminated", "shadow", "shadows",
    "exposure", "brightness", "mood", "atmosphere", "tone", "serene", "dramatic", "focus",
    "focused", "sharp", "sharpness", "bokeh", "blur", "blurred", "framing", "framed",
    "composition", "centered", "camera", "angle", "style", "photorealistic", "cinematic",
    "realistic", "aesthetic",
];
const MINOR_PHRASES: &[&str] = &["depth of field", "close up", "wide shot"];

/// Keyword categorization of a requirement into major (true) or minor (false).
pub fn classify_major(text: &str) -> bool {
    let lowered = text.to_lowercase();
    let tokens: Vec<&str> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();
    let joined = format!(" {} ", tokens.join(" "));
    let has = |words: &[&str], phrases: &[&str]| {
        tokens.iter().any(|t| words.contains(t))
            || phrases.iter().any(|p| joined.contains(&format!(" {p} ")))
    };
    if has(MAJOR_WORDS, MAJOR_PHRASES) {
        return true;
    }
    !has(MINOR_WORDS, MINOR_PHRASES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzerDecision {
    Continue,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerOutput {
    pub reasoning: String,
    pub original_prompt_echo: String,
    pub current_prompt_echo: String,
    pub checklist: RequirementChecklist,
    pub decision: AnalyzerDecision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenRewriteOutput {
    pub reasoning: String,
    pub planned_adjustments: Vec<String>,
    pub adjusted_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRewriteOutput {
    pub reasoning: String,
    pub planned_edits: Vec<String>,
    pub top_edit: String,
    pub comprehensive_edit: String,
    /// Filled in by refinement when the edit population is built.
    pub random_edit: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Resample,
    Rewrite,
    EditTop,
    EditRandom,
    EditComp,
}

impl CandidateKind {
    pub const ALL: [CandidateKind; 5] = [
        CandidateKind::Resample,
        CandidateKind::Rewrite,
        CandidateKind::EditTop,
        CandidateKind::EditRandom,
        CandidateKind::EditComp,
    ];

    pub fn is_edit(self) -> bool {
        matches!(self, Self::EditTop | Self::EditRandom | Self::EditComp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Resample => "resample",
            Self::Rewrite => "rewrite",
            Self::EditTop => "edit_top",
            Self::EditRandom => "edit_random",
            Self::EditComp => "edit_comp",
        }
    }
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// (round, slot) address of a candidate. Ordering is the tie-break order:
/// earlier round first, then lower slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateId {
    pub round: u32,
    pub slot: u32,
}

impl fmt::Display for CandidateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}_s{}", self.round, self.slot)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub round: u32,
    pub slot: u32,
    pub seed: u64,
    pub prompt: String,
    pub reference: Option<ImageRef>,
    pub kind: CandidateKind,
}

impl Candidate {
    pub fn id(&self) -> CandidateId {
        CandidateId { round: self.round, slot: self.slot }
    }

    /// Reference present exactly on edit kinds.
    pub fn is_consistent(&self) -> bool {
        self.reference.is_some() == self.kind.is_edit()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    pub output: ImageRef,
    pub fitness: f64,
}

impl ScoredCandidate {
    pub fn id(&self) -> CandidateId {
        self.candidate.id()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub label: String,
    pub bbox: [u32; 4],
    pub mean_depth: u8,
}

impl Region {
    pub fn area(&self) -> u64 {
        let [x0, y0, x1, y1] = self.bbox;
        u64::from(x1.saturating_sub(x0)) * u64::from(y1.saturating_sub(y0))
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        let [x0, y0, x1, y1] = self.bbox;
        x0 <= x1 && x1 <= width && y0 <= y1 && y1 <= height
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundingEvidence {
    pub caption: String,
    pub regions: Vec<Region>,
    pub image_width: u32,
    pub image_height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationTriplet {
    pub question: String,
    pub answer: Answer,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierOutput {
    pub reasoning: String,
    pub image_caption: String,
    pub triplets: Vec<VerificationTriplet>,
    pub summary: String,
    pub all_satisfied: bool,
}

/// Forces `all_satisfied` to the conjunction of the triplet answers. Returns
/// a degradation note when the backend's flag disagreed.
pub fn enforce_verifier_consistency(mut raw: VerifierOutput) -> (VerifierOutput, Option<String>) {
    let conj = raw.triplets.iter().all(|t| t.answer == Answer::Yes);
    let note = (raw.all_satisfied != conj).then(|| {
        format!(
            "verifier all_satisfied={} contradicted its answers; corrected to {}",
            raw.all_satisfied, conj
        )
    });
    raw.all_satisfied = conj;
    (raw, note)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionOutput {
    Image(ImageRef),
    Failure(String),
}

/// Outcome of one candidate execution. A failure carries no image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub candidate: CandidateId,
    pub output: ExecutionOutput,
    #[serde(skip)]
    pub duration: std::time::Duration,
}

impl ExecutionResult {
    pub fn image(&self) -> Option<&ImageRef> {
        match &self.output {
            ExecutionOutput::Image(img) => Some(img),
            ExecutionOutput::Failure(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub analyzer: AnalyzerOutput,
    pub gen_rewrite: Option<GenRewriteOutput>,
    pub edit_rewrite: Option<EditRewriteOutput>,
    pub candidates: Vec<Candidate>,
    pub executions: Vec<ExecutionResult>,
    pub scored: Vec<ScoredCandidate>,
    pub round_best: CandidateId,
    pub evidence: Option<GroundingEvidence>,
    pub verifier: Option<VerifierOutput>,
    pub agent_calls: u32,
    pub samples: u32,
}

impl RoundRecord {
    pub fn scored_by_id(&self, id: CandidateId) -> Option<&ScoredCandidate> {
        self.scored.iter().find(|s| s.id() == id)
    }

    pub fn round_best_scored(&self) -> &ScoredCandidate {
        self.scored_by_id(self.round_best)
            .expect("round_best always names a scored candidate")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationKind {
    AnalyzerEnd,
    VerifierAllSatisfied,
    MaxRounds,
    Error,
}

impl TerminationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AnalyzerEnd => "analyzer_end",
            Self::VerifierAllSatisfied => "verifier_all_satisfied",
            Self::MaxRounds => "max_rounds",
            Self::Error => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationReason {
    pub kind: TerminationKind,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub user_prompt: String,
    pub config: RunConfig,
    pub rounds: Vec<RoundRecord>,
    pub global_best: Option<CandidateId>,
    pub termination: Option<TerminationReason>,
    pub total_samples: u32,
    pub total_agent_calls: u32,
    /// Set when termination is `error`.
    pub error: Option<String>,
}

impl RunState {
    pub fn new(user_prompt: impl Into<String>, config: RunConfig) -> Self {
        Self {
            user_prompt: user_prompt.into(),
            config,
            rounds: Vec::new(),
            global_best: None,
            termination: None,
            total_samples: 0,
            total_agent_calls: 0,
            error: None,
        }
    }

    pub fn round(&self, round: u32) -> Option<&RoundRecord> {
        self.rounds.iter().find(|r| r.round == round)
    }

    pub fn scored(&self, id: CandidateId) -> Option<&ScoredCandidate> {
        self.round(id.round)?.scored_by_id(id)
    }

    pub fn global_best_scored(&self) -> Option<&ScoredCandidate> {
        self.scored(self.global_best?)
    }

    /// Image of the global best (the run's final output).
    pub fn final_image(&self) -> Option<&ImageRef> {
        self.global_best_scored().map(|s| &s.output)
    }
}
