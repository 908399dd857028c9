//! Run directory layout:
//!
//! ```text
//! <out>/<run-id>/
//!   config.json       config snapshot
//!   trace.jsonl       event trace
//!   images/r<round>_s<slot>.png
//!   final.png         global-best image
//!   summary.json      RunSummary
//! ```

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trace::TraceWriter;
use crate::backend::Backends;
use crate::config::RunConfig;
use crate::engine::Engine;
use crate::image::ImageStore;
use crate::model::{CandidateId, RunState, TerminationKind, TerminationReason};

pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_IMAGE: &str = "final.png";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub user_prompt: String,
    pub backend_profile: String,
    pub termination: TerminationReason,
    pub error: Option<String>,
    pub rounds: u32,
    pub total_samples: u32,
    pub total_agent_calls: u32,
    pub global_best: Option<CandidateId>,
    pub final_fitness: Option<f64>,
    /// Relative to the run directory.
    pub final_image: Option<String>,
}

impl RunSummary {
    pub fn succeeded(&self) -> bool {
        self.termination.kind != TerminationKind::Error
    }
}

/// Lowercase ASCII slug of the prompt, at most 40 characters.
pub fn slug(prompt: &str) -> String {
    let mut out = String::new();
    for c in prompt.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
        if out.len() >= 40 {
            break;
        }
    }
    let out = out.trim_end_matches('-').to_string();
    if out.is_empty() { "run".to_string() } else { out }
}

pub fn run_id_for(prompt: &str, seed: u64) -> String {
    format!("{}-s{seed}", slug(prompt))
}

/// Creates `<out>/<run_id>`, adding a numeric suffix if it already exists.
pub fn create_run_dir(out: &Path, run_id: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(out)?;
    let mut n = 1;
    loop {
        let name = if n == 1 { run_id.to_string() } else { format!("{run_id}-{n}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => {
                fs::create_dir(dir.join(IMAGES_DIR))?;
                return Ok(dir);
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e),
        }
    }
}

pub fn candidate_image_name(id: CandidateId) -> String {
    format!("r{}_s{}.png", id.round, id.slot)
}

/// Writes every candidate image of the completed rounds and the final image.
pub fn persist_images(dir: &Path, state: &RunState, images: &ImageStore) -> io::Result<Option<String>> {
    for record in &state.rounds {
        for exec in &record.executions {
            if let Some(img) = exec.image() {
                let bytes = images.get(img).map_err(io::Error::other)?;
                fs::write(dir.join(IMAGES_DIR).join(candidate_image_name(exec.candidate)), bytes.as_slice())?;
            }
        }
    }
    match state.final_image() {
        Some(img) => {
            let bytes = images.get(img).map_err(io::Error::other)?;
            fs::write(dir.join(FINAL_IMAGE), bytes.as_slice())?;
            Ok(Some(FINAL_IMAGE.to_string()))
        }
        None => Ok(None),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    fs::write(path, text + "\n")
}

pub fn summarize(run_id: &str, profile: &str, state: &RunState, final_image: Option<String>) -> RunSummary {
    RunSummary {
        run_id: run_id.to_string(),
        user_prompt: state.user_prompt.clone(),
        backend_profile: profile.to_string(),
        termination: state.termination.unwrap_or(TerminationReason { kind: TerminationKind::Error, round: 0 }),
        error: state.error.clone(),
        rounds: state.rounds.len() as u32,
        total_samples: state.total_samples,
        total_agent_calls: state.total_agent_calls,
        global_best: state.global_best,
        final_fitness: state.global_best_scored().map(|s| s.fitness),
        final_image,
    }
}

pub fn read_summary(dir: &Path) -> io::Result<RunSummary> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE))?;
    serde_json::from_str(&text).map_err(io::Error::other)
}

/// Runs one prompt and persists everything under `<out>/<run_id>`. The trace
/// is written as the run progresses, so it survives a failed run.
pub fn run_to_store(
    out: &Path,
    run_id: &str,
    user_prompt: &str,
    config: &RunConfig,
    backends: Backends,
) -> io::Result<(PathBuf, RunSummary)> {
    let dir = create_run_dir(out, run_id)?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    let file = File::create(dir.join(TRACE_FILE))?;
    let mut trace = TraceWriter::new(BufWriter::new(file));
    let profile = backends.profile;
    let engine = Engine::new(config.clone(), backends);
    let state = engine.run(user_prompt, &mut trace);
    drop(trace);
    let final_image = persist_images(&dir, &state, engine.images())?;
    let id = dir.file_name().map_or_else(|| run_id.to_string(), |n| n.to_string_lossy().into_owned());
    let summary = summarize(&id, profile, &state, final_image);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok((dir, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::sim_backends;

    #[test]
    fn slugs() {
        assert_eq!(slug("A photo of a bear, above a clock!"), "a-photo-of-a-bear-above-a-clock");
        assert_eq!(slug("!!!"), "run");
        assert!(slug(&"x".repeat(100)).len() <= 40);
    }

    #[test]
    fn run_dir_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let config = RunConfig { force_rounds: Some(2), ..RunConfig::default() };
        let prompt = "a bear above a clock";
        let (dir, summary) = run_to_store(tmp.path(), "bear", prompt, &config, sim_backends(&config, prompt)).unwrap();
        assert!(summary.succeeded());
        assert_eq!((summary.total_samples, summary.total_agent_calls), (16, 6));
        for f in [CONFIG_FILE, TRACE_FILE, SUMMARY_FILE, FINAL_IMAGE] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        let n_images = fs::read_dir(dir.join(IMAGES_DIR)).unwrap().count();
        assert_eq!(n_images, 16);
        assert!(dir.join(IMAGES_DIR).join("r2_s7.png").is_file());
        assert_eq!(read_summary(&dir).unwrap(), summary);
        let snapshot: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(snapshot, config);
        let (dir2, _) = run_to_store(tmp.path(), "bear", prompt, &config, sim_backends(&config, prompt)).unwrap();
        assert_ne!(dir, dir2);
    }
}
