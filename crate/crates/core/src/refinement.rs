//! Per-round action schedule and construction of the candidate population
//! from the global best.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::hashing::{hash_bytes, hash_words, mix64};
use crate::model::{Candidate, CandidateKind, EditRewriteOutput, GenRewriteOutput, ImageRef};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefinementError {
    #[error("plan needs {0} rewrite candidates but no rewritten prompt is available")]
    MissingRewrite(u32),
    #[error("plan needs edit candidates but no edit instructions are available")]
    MissingEdits,
    #[error("plan needs edit candidates but there is no parent image")]
    MissingParentImage,
    #[error("edit rewriter produced no planned edits")]
    EmptyPlannedEdits,
}

/// Candidate counts for one round, keyed by kind. Zero counts are omitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub round: u32,
    pub counts: BTreeMap<CandidateKind, u32>,
}

impl ActionPlan {
    fn from_counts(round: u32, counts: impl IntoIterator<Item = (CandidateKind, u32)>) -> Self {
        let counts = counts.into_iter().filter(|(_, n)| *n > 0).collect();
        Self { round, counts }
    }

    pub fn count(&self, kind: CandidateKind) -> u32 {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn has_edits(&self) -> bool {
        self.counts.keys().any(|k| k.is_edit())
    }

    /// Moves every edit slot to rewrite, keeping the population size.
    pub fn without_edits(&self) -> Self {
        let edits: u32 = self.counts.iter().filter(|(k, _)| k.is_edit()).map(|(_, n)| n).sum();
        Self::from_counts(
            self.round,
            [
                (CandidateKind::Resample, self.count(CandidateKind::Resample)),
                (CandidateKind::Rewrite, self.count(CandidateKind::Rewrite) + edits),
            ],
        )
    }
}

/// Early rounds (`round <= k_min`) explore with resample + rewrite; later
/// rounds combine rewrite with the three edit variants.
pub fn schedule_actions(round: u32, config: &RunConfig) -> ActionPlan {
    if round <= config.k_min {
        ActionPlan::from_counts(
            round,
            [
                (CandidateKind::Resample, config.early_resample),
                (CandidateKind::Rewrite, config.early_rewrite),
            ],
        )
    } else {
        let plan = ActionPlan::from_counts(
            round,
            [
                (CandidateKind::Rewrite, config.late_rewrite),
                (CandidateKind::EditTop, 1),
                (CandidateKind::EditRandom, 1),
                (CandidateKind::EditComp, 1),
            ],
        );
        if config.enable_editing {
            plan
        } else {
            plan.without_edits()
        }
    }
}

/// `seed = mix64(run_seed + ((round << 32) | slot) * φ)` with φ the 64-bit
/// golden-ratio constant and `mix64` the SplitMix64 finalizer. Every step is
/// a bijection, so seeds never collide within a run.
pub fn derive_seed(run_seed: u64, round: u32, slot: u32) -> u64 {
    let key = (u64::from(round) << 32) | u64::from(slot);
    mix64(run_seed.wrapping_add(key.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Dedicated stream for the random-edit draw of one round.
pub fn random_edit_rng(run_seed: u64, round: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_words(&[run_seed, u64::from(round), hash_bytes(b"random_edit")]))
}

fn generation_candidates(
    prompt: &str,
    kind: CandidateKind,
    count: u32,
    round: u32,
    first_slot: u32,
    run_seed: u64,
) -> Vec<Candidate> {
    (first_slot..first_slot + count)
        .map(|slot| Candidate {
            round,
            slot,
            seed: derive_seed(run_seed, round, slot),
            prompt: prompt.to_string(),
            reference: None,
            kind,
        })
        .collect()
}

pub fn make_resample_candidates(
    user_prompt: &str,
    count: u32,
    round: u32,
    first_slot: u32,
    run_seed: u64,
) -> Vec<Candidate> {
    generation_candidates(user_prompt, CandidateKind::Resample, count, round, first_slot, run_seed)
}

pub fn make_rewrite_candidates(
    rewritten_prompt: &str,
    count: u32,
    round: u32,
    first_slot: u32,
    run_seed: u64,
) -> Vec<Candidate> {
    generation_candidates(rewritten_prompt, CandidateKind::Rewrite, count, round, first_slot, run_seed)
}

/// Picks the random edit: uniform over planned edits other than the top
/// edit, or the sole planned edit when nothing else exists.
pub fn pick_random_edit(edits: &EditRewriteOutput, rng: &mut impl Rng) -> Result<String, RefinementError> {
    let first = edits.planned_edits.first().ok_or(RefinementError::EmptyPlannedEdits)?;
    let others: Vec<&String> = edits.planned_edits.iter().filter(|e| **e != edits.top_edit).collect();
    if others.is_empty() {
        return Ok(first.clone());
    }
    Ok(others[rng.random_range(0..others.len())].clone())
}

/// The three edit candidates (top, random, comp), all referencing the
/// parent image. Returns the edit output with `random_edit` filled in.
pub fn make_edit_candidates(
    edits: &EditRewriteOutput,
    parent_image: &ImageRef,
    round: u32,
    first_slot: u32,
    run_seed: u64,
    rng: &mut impl Rng,
) -> Result<(Vec<Candidate>, EditRewriteOutput), RefinementError> {
    let random = pick_random_edit(edits, rng)?;
    let variants = [
        (CandidateKind::EditTop, edits.top_edit.clone()),
        (CandidateKind::EditRandom, random.clone()),
        (CandidateKind::EditComp, edits.comprehensive_edit.clone()),
    ];
    let candidates = variants
        .into_iter()
        .zip(first_slot..)
        .map(|((kind, prompt), slot)| Candidate {
            round,
            slot,
            seed: derive_seed(run_seed, round, slot),
            prompt,
            reference: Some(parent_image.clone()),
            kind,
        })
        .collect();
    let mut filled = edits.clone();
    filled.random_edit = Some(random);
    Ok((candidates, filled))
}

/// Everything `build_population` may draw on.
#[derive(Debug, Clone, Copy)]
pub struct PopulationInputs<'a> {
    pub user_prompt: &'a str,
    pub run_seed: u64,
    pub parent_image: Option<&'a ImageRef>,
    pub gen_rewrite: Option<&'a GenRewriteOutput>,
    pub edit_rewrite: Option<&'a EditRewriteOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub candidates: Vec<Candidate>,
    pub edit_rewrite: Option<EditRewriteOutput>,
}

/// Builds the round's candidates with slots numbered in kind order
/// (resample, rewrite, edit_top, edit_random, edit_comp).
pub fn build_population(plan: &ActionPlan, inputs: &PopulationInputs<'_>) -> Result<Population, RefinementError> {
    let round = plan.round;
    let mut candidates = Vec::with_capacity(plan.total() as usize);
    let next_slot = |c: &Vec<Candidate>| c.len() as u32;

    let n = plan.count(CandidateKind::Resample);
    candidates.extend(make_resample_candidates(inputs.user_prompt, n, round, 0, inputs.run_seed));

    let n = plan.count(CandidateKind::Rewrite);
    if n > 0 {
        let rewrite = inputs.gen_rewrite.ok_or(RefinementError::MissingRewrite(n))?;
        let slot = next_slot(&candidates);
        candidates.extend(make_rewrite_candidates(&rewrite.adjusted_prompt, n, round, slot, inputs.run_seed));
    }

    let mut edit_rewrite = None;
    if plan.has_edits() {
        let edits = inputs.edit_rewrite.ok_or(RefinementError::MissingEdits)?;
        let parent = inputs.parent_image.ok_or(RefinementError::MissingParentImage)?;
        let mut rng = random_edit_rng(inputs.run_seed, round);
        let slot = next_slot(&candidates);
        let (edit_cands, filled) = make_edit_candidates(edits, parent, round, slot, inputs.run_seed, &mut rng)?;
        candidates.extend(edit_cands);
        edit_rewrite = Some(filled);
    }
    Ok(Population { candidates, edit_rewrite })
}
