//! Runs a candidate population against the generator and editor with
//! bounded parallelism.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use thiserror::Error;

use crate::backend::{Backends, EditRequest, GenerateRequest};
use crate::config::RunConfig;
use crate::image::ImageStore;
use crate::model::{Candidate, ExecutionOutput, ExecutionResult, ImageRef};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecutionError {
    #[error("population is empty")]
    EmptyPopulation,
    #[error("all {} candidates of round {round} failed", results.len())]
    AllFailed { round: u32, results: Vec<ExecutionResult> },
}

fn produce(c: &Candidate, config: &RunConfig, backends: &Backends, images: &ImageStore) -> Result<ImageRef, String> {
    let bytes = match &c.reference {
        None => backends
            .generator
            .generate(&GenerateRequest {
                prompt: c.prompt.clone(),
                seed: c.seed,
                steps: config.steps,
                width: config.width,
                height: config.height,
            })
            .map_err(|e| format!("generator: {e}"))?,
        Some(reference) => {
            let ref_bytes = images.get(reference).map_err(|e| format!("reference: {e}"))?;
            backends
                .editor
                .edit(&EditRequest {
                    instruction: &c.prompt,
                    seed: c.seed,
                    steps: config.steps,
                    reference: &ref_bytes,
                })
                .map_err(|e| format!("editor: {e}"))?
        }
    };
    images.put_png(bytes).map_err(|e| format!("output: {e}"))
}

/// Generator when the candidate has no reference, editor otherwise. Backend
/// failures become a failed result for this candidate only.
pub fn execute_candidate(c: &Candidate, config: &RunConfig, backends: &Backends, images: &ImageStore) -> ExecutionResult {
    let started = Instant::now();
    let output = match produce(c, config, backends, images) {
        Ok(img) => ExecutionOutput::Image(img),
        Err(note) => ExecutionOutput::Failure(note),
    };
    ExecutionResult { candidate: c.id(), output, duration: started.elapsed() }
}

/// Executes every candidate with at most `config.parallelism` in flight and
/// returns results in slot order.
pub fn execute_population(
    cs: &[Candidate],
    config: &RunConfig,
    backends: &Backends,
    images: &ImageStore,
) -> Result<Vec<ExecutionResult>, ExecutionError> {
    let round = cs.first().ok_or(ExecutionError::EmptyPopulation)?.round;
    let workers = config.parallelism.clamp(1, cs.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(c) = cs.get(i) else { break };
                if tx.send((i, execute_candidate(c, config, backends, images))).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<ExecutionResult>> = vec![None; cs.len()];
    for (i, r) in rx {
        slots[i] = Some(r);
    }
    let mut results: Vec<ExecutionResult> = slots
        .into_iter()
        .map(|r| r.expect("every candidate yields a result"))
        .collect();
    results.sort_by_key(|r| r.candidate);
    if results.iter().all(|r| r.image().is_none()) {
        return Err(ExecutionError::AllFailed { round, results });
    }
    Ok(results)
}
