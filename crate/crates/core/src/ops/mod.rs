//! Operational plumbing around the engine.

pub mod inspect;
pub mod metrics;
pub mod replay;
pub mod store;
pub mod trace;
