//! Reply documents for the four agent roles and their JSON schemas. Field
//! names are the ones the system prompts ask for.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerReply {
    pub analyzer_reasoning: String,
    pub original_prompt: String,
    pub current_prompt: String,
    pub requirements_analysis: Vec<String>,
    pub satisfied_requirements: Vec<String>,
    pub unsatisfied_requirements: Vec<String>,
    pub binary_questions: Vec<String>,
    /// "continue" or "ending".
    pub model_choice: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenRewriterReply {
    pub rewriter_reasoning: String,
    pub original_prompt: String,
    pub current_prompt: String,
    pub planned_adjustments: Vec<String>,
    pub adjusted_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRewriterReply {
    pub rewriter_reasoning: String,
    pub original_prompt: String,
    pub current_prompt: String,
    pub planned_edits: Vec<String>,
    pub single_editing_prompt: String,
    pub comprehensive_editing_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierReply {
    pub verifier_reasoning: String,
    pub current_image_caption: String,
    /// (question, "Yes" | "No", explanation)
    pub questions_answers_and_explanations: Vec<(String, String, String)>,
    pub verifier_summary: String,
    pub all_satisfied: bool,
}

pub const MODEL_CHOICE_CONTINUE: &str = "continue";
pub const MODEL_CHOICE_ENDING: &str = "ending";

fn string() -> Value {
    json!({"type": "string"})
}

fn string_list() -> Value {
    json!({"type": "array", "items": {"type": "string"}})
}

fn object(props: Vec<(&str, Value)>) -> Value {
    let required: Vec<&str> = props.iter().map(|(k, _)| *k).collect();
    let properties: serde_json::Map<String, Value> =
        props.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    json!({
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": false,
    })
}

pub fn analyzer_schema() -> Value {
    object(vec![
        ("analyzer_reasoning", string()),
        ("original_prompt", string()),
        ("current_prompt", string()),
        ("requirements_analysis", string_list()),
        ("satisfied_requirements", string_list()),
        ("unsatisfied_requirements", string_list()),
        ("binary_questions", string_list()),
        ("model_choice", json!({"type": "string", "enum": [MODEL_CHOICE_CONTINUE, MODEL_CHOICE_ENDING]})),
    ])
}

pub fn gen_rewriter_schema() -> Value {
    object(vec![
        ("rewriter_reasoning", string()),
        ("original_prompt", string()),
        ("current_prompt", string()),
        ("planned_adjustments", string_list()),
        ("adjusted_prompt", string()),
    ])
}

pub fn edit_rewriter_schema() -> Value {
    object(vec![
        ("rewriter_reasoning", string()),
        ("original_prompt", string()),
        ("current_prompt", string()),
        ("planned_edits", string_list()),
        ("single_editing_prompt", string()),
        ("comprehensive_editing_prompt", string()),
    ])
}

pub fn verifier_schema() -> Value {
    object(vec![
        ("verifier_reasoning", string()),
        ("current_image_caption", string()),
        (
            "questions_answers_and_explanations",
            json!({
                "type": "array",
                "items": {
                    "type": "array",
                    "prefixItems": [
                        {"type": "string"},
                        {"type": "string", "enum": ["Yes", "No"]},
                        {"type": "string"}
                    ],
                    "minItems": 3,
                    "maxItems": 3
                }
            }),
        ),
        ("verifier_summary", string()),
        ("all_satisfied", json!({"type": "boolean"})),
    ])
}

/// Finds the JSON document in a model reply: the whole text, a fenced block,
/// or the outermost braces.
pub fn extract_json(text: &str) -> &str {
    let t = text.trim();
    if t.starts_with('{') && t.ends_with('}') {
        return t;
    }
    match (t.find('{'), t.rfind('}')) {
        (Some(a), Some(b)) if a < b => &t[a..=b],
        _ => t,
    }
}
