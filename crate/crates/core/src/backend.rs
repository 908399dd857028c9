//! Backend traits and their HTTP clients. Simulated implementations live in
//! [`crate::sim`].
//!
//! Wire bodies are documented in `docs/backend-protocol.md`.

use std::io::Read;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::ChatRequest;
use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("no endpoint configured for the {0} backend")]
    NotConfigured(&'static str),
    #[error("backend rejected request: {0}")]
    Rejected(String),
}

/// Generator request body, also the wire form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct EditRequest<'a> {
    pub instruction: &'a str,
    pub seed: u64,
    pub steps: u32,
    pub reference: &'a [u8],
}

/// Editor wire body: the reference PNG travels base64-encoded in `image`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditWire {
    pub instruction: String,
    pub seed: u64,
    pub steps: u32,
    pub image: String,
}

impl EditWire {
    pub fn from_request(req: &EditRequest<'_>) -> Self {
        Self {
            instruction: req.instruction.to_string(),
            seed: req.seed,
            steps: req.steps,
            image: B64.encode(req.reference),
        }
    }

    pub fn reference_bytes(&self) -> Result<Vec<u8>, BackendError> {
        B64.decode(&self.image).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreWire {
    pub prompt: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
}

/// Region as reported by the grounding backend, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRegion {
    pub label: String,
    pub bbox: [i64; 4],
    pub mean_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResponse {
    pub caption: String,
    pub width: u32,
    pub height: u32,
    pub regions: Vec<RawRegion>,
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerateRequest) -> Result<Vec<u8>, BackendError>;
}

pub trait Editor: Send + Sync {
    fn edit(&self, req: &EditRequest<'_>) -> Result<Vec<u8>, BackendError>;
}

pub trait Scorer: Send + Sync {
    fn score(&self, image: &[u8], prompt: &str) -> Result<f64, BackendError>;
}

pub trait GroundingTool: Send + Sync {
    fn ground(&self, image: &[u8]) -> Result<GroundingResponse, BackendError>;
}

/// Chat-style multimodal model. Returns the assistant message text.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

/// The full set of backends a run needs.
#[derive(Clone)]
pub struct Backends {
    /// "real" or "sim"; recorded at the start of each trace.
    pub profile: &'static str,
    pub generator: Arc<dyn Generator>,
    pub editor: Arc<dyn Editor>,
    pub scorer: Arc<dyn Scorer>,
    pub grounding: Arc<dyn GroundingTool>,
    pub chat: Arc<dyn ChatBackend>,
}

impl Backends {
    /// HTTP clients for every configured endpoint.
    pub fn http(config: &RunConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(config.timeout())
            .build();
        let ep = &config.endpoints;
        let client = |name: &'static str, url: &Option<String>| HttpClient {
            name,
            url: url.clone(),
            agent: agent.clone(),
        };
        Self {
            profile: "real",
            generator: Arc::new(HttpGenerator(client("generator", &ep.generator))),
            editor: Arc::new(HttpEditor(client("editor", &ep.editor))),
            scorer: Arc::new(HttpScorer(client("scorer", &ep.scorer))),
            grounding: Arc::new(HttpGrounding(client("grounding", &ep.grounding))),
            chat: Arc::new(HttpChat {
                client: client("agent", &ep.agent),
                model: config.agent_model.clone(),
            }),
        }
    }
}

#[derive(Clone)]
struct HttpClient {
    name: &'static str,
    url: Option<String>,
    agent: ureq::Agent,
}

impl HttpClient {
    fn url(&self) -> Result<&str, BackendError> {
        self.url.as_deref().ok_or(BackendError::NotConfigured(self.name))
    }

    fn post_json(&self, body: &impl Serialize) -> Result<ureq::Response, BackendError> {
        let url = self.url()?;
        let body = serde_json::to_vec(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
        self.agent
            .post(url)
            .set("Content-Type", "application/json")
            .send_bytes(&body)
            .map_err(map_ureq)
    }

    fn post_png(&self, bytes: &[u8]) -> Result<ureq::Response, BackendError> {
        let url = self.url()?;
        self.agent
            .post(url)
            .set("Content-Type", "image/png")
            .send_bytes(bytes)
            .map_err(map_ureq)
    }
}

fn map_ureq(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Status(status, resp) => BackendError::Status {
            status,
            body: resp.into_string().unwrap_or_default(),
        },
        ureq::Error::Transport(t) => BackendError::Transport(t.to_string()),
    }
}

const MAX_BODY: u64 = 256 * 1024 * 1024;

fn read_bytes(resp: ureq::Response) -> Result<Vec<u8>, BackendError> {
    let mut out = Vec::new();
    resp.into_reader()
        .take(MAX_BODY)
        .read_to_end(&mut out)
        .map_err(|e| BackendError::Transport(e.to_string()))?;
    Ok(out)
}

fn read_json<T: for<'de> Deserialize<'de>>(resp: ureq::Response) -> Result<T, BackendError> {
    let bytes = read_bytes(resp)?;
    serde_json::from_slice(&bytes).map_err(|e| BackendError::Malformed(e.to_string()))
}

struct HttpGenerator(HttpClient);

impl Generator for HttpGenerator {
    fn generate(&self, req: &GenerateRequest) -> Result<Vec<u8>, BackendError> {
        read_bytes(self.0.post_json(req)?)
    }
}

struct HttpEditor(HttpClient);

impl Editor for HttpEditor {
    fn edit(&self, req: &EditRequest<'_>) -> Result<Vec<u8>, BackendError> {
        read_bytes(self.0.post_json(&EditWire::from_request(req))?)
    }
}

struct HttpScorer(HttpClient);

impl Scorer for HttpScorer {
    fn score(&self, image: &[u8], prompt: &str) -> Result<f64, BackendError> {
        let body = ScoreWire { prompt: prompt.to_string(), image: B64.encode(image) };
        let resp: ScoreResponse = read_json(self.0.post_json(&body)?)?;
        Ok(resp.score)
    }
}

struct HttpGrounding(HttpClient);

impl GroundingTool for HttpGrounding {
    fn ground(&self, image: &[u8]) -> Result<GroundingResponse, BackendError> {
        read_json(self.0.post_png(image)?)
    }
}

struct HttpChat {
    client: HttpClient,
    model: String,
}

impl ChatBackend for HttpChat {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let body = req.to_wire(&self.model);
        let resp: serde_json::Value = read_json(self.client.post_json(&body)?)?;
        extract_message_text(&resp)
    }
}

/// Pulls `choices[0].message.content` out of a chat-completions reply. The
/// content may be a string or an array of text parts.
pub fn extract_message_text(resp: &serde_json::Value) -> Result<String, BackendError> {
    let content = resp
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Malformed("reply has no choices[0].message.content".into()))?;
    match content {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(BackendError::Malformed(format!("unexpected content: {other}"))),
    }
}

/// Wraps a reply body in the chat-completions envelope. Used by stand-in
/// servers.
pub fn chat_reply_envelope(content: &str) -> serde_json::Value {
    serde_json::json!({
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": { "role": "assistant", "content": content },
            "finish_reason": "stop"
        }]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_string_and_part_content() {
        let v = chat_reply_envelope("{\"a\":1}");
        assert_eq!(extract_message_text(&v).unwrap(), "{\"a\":1}");
        let v = serde_json::json!({"choices":[{"message":{"content":[{"type":"text","text":"ab"},{"type":"text","text":"c"}]}}]});
        assert_eq!(extract_message_text(&v).unwrap(), "abc");
        assert!(extract_message_text(&serde_json::json!({})).is_err());
    }

    #[test]
    fn unconfigured_endpoint_errors_without_network() {
        let backends = Backends::http(&RunConfig::default());
        let err = backends
            .generator
            .generate(&GenerateRequest { prompt: "x".into(), seed: 1, steps: 1, width: 1, height: 1 })
            .unwrap_err();
        assert_eq!(err, BackendError::NotConfigured("generator"));
    }

    #[test]
    fn edit_wire_round_trips_reference() {
        let req = EditRequest { instruction: "fix", seed: 3, steps: 28, reference: &[1, 2, 3] };
        let wire = EditWire::from_request(&req);
        assert_eq!(wire.reference_bytes().unwrap(), vec![1, 2, 3]);
    }
}
