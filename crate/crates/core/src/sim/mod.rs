//! Deterministic simulated backends over a hidden requirement world.

pub mod agents;
pub mod convergence;
pub mod world;

use std::sync::Arc;

pub use agents::SimAgents;
pub use convergence::{oracle_convergence, ConvergenceStats};
pub use world::{
    parse_requirement_indices, question_text, requirement_text, sim_edit, sim_generate,
    sim_generate_with, sim_ground, sim_score, SimEditor, SimGenerator, SimGrounding, SimImage,
    SimScorer, WorldSpec,
};

use crate::backend::Backends;
use crate::config::RunConfig;

/// In-process sim backends for one prompt. The generator needs the user
/// prompt to tell resample requests from rewrite requests.
pub fn sim_backends(config: &RunConfig, user_prompt: &str) -> Backends {
    let world = config.world();
    Backends {
        profile: "sim",
        generator: Arc::new(SimGenerator { world: world.clone(), user_prompt: user_prompt.to_string() }),
        editor: Arc::new(SimEditor { world: world.clone() }),
        scorer: Arc::new(SimScorer),
        grounding: Arc::new(SimGrounding),
        chat: Arc::new(SimAgents::new(world, config.k_min)),
    }
}
