//! Repeated full-engine runs against the sim world.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::world::{SimImage, WorldSpec};
use crate::config::RunConfig;
use crate::engine::Engine;
use crate::model::{RunState, TerminationKind};
use crate::ops::trace::NullTrace;

pub const SIM_PROMPT: &str = "a simulated scene with hidden requirements";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub run_seed: u64,
    /// The final image satisfies every hidden requirement.
    pub satisfied: bool,
    pub rounds: u32,
    pub samples: u32,
    pub agent_calls: u32,
    pub termination: TerminationKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStats {
    pub trials: u32,
    pub satisfied_rate: f64,
    pub mean_rounds: f64,
    pub mean_samples: f64,
    pub mean_agent_calls: f64,
    /// Completed rounds → number of runs.
    pub rounds_histogram: BTreeMap<u32, u32>,
    pub terminations: BTreeMap<TerminationKind, u32>,
}

fn final_bits(engine: &Engine, state: &RunState) -> Option<SimImage> {
    let bytes = engine.images().get(state.final_image()?).ok()?;
    SimImage::decode_png(&bytes).ok()
}

/// One engine run in `world` with the given seed.
pub fn run_trial(world: &WorldSpec, config: &RunConfig, run_seed: u64) -> TrialOutcome {
    let config = RunConfig { run_seed, sim_world: Some(world.clone()), ..config.clone() };
    let engine = Engine::sim(config, SIM_PROMPT);
    let state = engine.run(SIM_PROMPT, &mut NullTrace);
    TrialOutcome {
        run_seed,
        satisfied: final_bits(&engine, &state).is_some_and(|img| img.all_set()),
        rounds: state.rounds.len() as u32,
        samples: state.total_samples,
        agent_calls: state.total_agent_calls,
        termination: state.termination.map_or(TerminationKind::Error, |t| t.kind),
    }
}

pub fn summarize(outcomes: &[TrialOutcome]) -> ConvergenceStats {
    let n = outcomes.len().max(1) as f64;
    let mean = |f: fn(&TrialOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
    let mut rounds_histogram = BTreeMap::new();
    let mut terminations = BTreeMap::new();
    for o in outcomes {
        *rounds_histogram.entry(o.rounds).or_insert(0) += 1;
        *terminations.entry(o.termination).or_insert(0) += 1;
    }
    ConvergenceStats {
        trials: outcomes.len() as u32,
        satisfied_rate: mean(|o| f64::from(u8::from(o.satisfied))),
        mean_rounds: mean(|o| f64::from(o.rounds)),
        mean_samples: mean(|o| f64::from(o.samples)),
        mean_agent_calls: mean(|o| f64::from(o.agent_calls)),
        rounds_histogram,
        terminations,
    }
}

/// Runs `trials` engines with run seeds `config.run_seed + t`, spread over
/// the available cores.
pub fn oracle_convergence(world: &WorldSpec, config: &RunConfig, trials: u32) -> ConvergenceStats {
    let seeds: Vec<u64> = (0..u64::from(trials)).map(|t| config.run_seed.wrapping_add(t)).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(workers).max(1);
    let single = RunConfig { parallelism: 1, ..config.clone() };
    let outcomes: Vec<TrialOutcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                let single = &single;
                scope.spawn(move || part.iter().map(|&s| run_trial(world, single, s)).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("trial thread")).collect()
    });
    summarize(&outcomes)
}
