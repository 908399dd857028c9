//! Requirement-adaptive evolutionary refinement for text-to-image
//! generation.
//!
//! A chat-model analyzer turns the prompt into a checklist of requirements.
//! Each round builds a scored population of candidates from the best image
//! so far, and a verifier checks the round's best against the checklist.
//! The loop stops when the requirements are met or the round cap is hit.
//!
//! Backends sit behind traits in [`backend`]; [`sim`] provides a
//! deterministic simulated world for tests and experiments.

pub mod agents;
pub mod backend;
pub mod config;
pub mod engine;
pub mod execution;
pub mod grounding;
pub mod hashing;
pub mod image;
pub mod model;
pub mod ops;
pub mod refinement;
pub mod sim;

pub use backend::{Backends, BackendError};
pub use config::{ConfigError, Endpoints, RunConfig};
pub use engine::Engine;
pub use image::ImageStore;
pub use model::*;
pub use ops::metrics::MetricsReport;
pub use ops::store::RunSummary;
pub use ops::trace::{EventKind, TraceEvent, TraceSink};
pub use sim::WorldSpec;
