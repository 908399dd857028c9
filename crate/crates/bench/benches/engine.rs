use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use raise_core::grounding::{parse_evidence, serialize_evidence};
use raise_core::ops::trace::{verify_trace, MemoryTrace, NullTrace};
use raise_core::refinement::{build_population, derive_seed, schedule_actions, PopulationInputs};
use raise_core::{EditRewriteOutput, Engine, GenRewriteOutput, GroundingEvidence, ImageRef, Region, RunConfig};

const PROMPT: &str = "a red car parked beside a blue bicycle under a street lamp";

fn refinement(c: &mut Criterion) {
    c.bench_function("derive_seed", |b| b.iter(|| derive_seed(black_box(42), black_box(3), black_box(7))));

    let config = RunConfig::default();
    let rewrite = GenRewriteOutput { reasoning: String::new(), planned_adjustments: vec![], adjusted_prompt: "q".into() };
    let edits = EditRewriteOutput {
        reasoning: String::new(),
        planned_edits: vec!["fix req-1".into(), "fix req-2".into(), "fix req-3".into()],
        top_edit: "fix req-1".into(),
        comprehensive_edit: "fix req-1 and req-2".into(),
        random_edit: None,
    };
    let parent = ImageRef { content_id: "sha256:0".into(), width: 64, height: 64, media_type: "image/png".into() };
    let inputs = PopulationInputs {
        user_prompt: PROMPT,
        run_seed: 1,
        parent_image: Some(&parent),
        gen_rewrite: Some(&rewrite),
        edit_rewrite: Some(&edits),
    };
    let plan = schedule_actions(3, &config);
    c.bench_function("build_population_late", |b| b.iter(|| build_population(black_box(&plan), &inputs).unwrap()));
}

fn grounding(c: &mut Criterion) {
    let evidence = GroundingEvidence {
        caption: "a red car on a street".into(),
        regions: (0..16)
            .map(|i| Region { label: format!("object {i}"), bbox: [i, i, i + 40, i + 30], mean_depth: 100 })
            .collect(),
        image_width: 1024,
        image_height: 1024,
    };
    c.bench_function("serialize_evidence_16", |b| b.iter(|| serialize_evidence(black_box(&evidence))));
    let text = serialize_evidence(&evidence);
    c.bench_function("parse_evidence_16", |b| b.iter(|| parse_evidence(black_box(&text)).unwrap()));
}

fn runs(c: &mut Criterion) {
    let forced = RunConfig { force_rounds: Some(4), ..RunConfig::default() };
    c.bench_function("sim_run_4_rounds", |b| {
        b.iter(|| Engine::sim(forced.clone(), PROMPT).run(PROMPT, &mut NullTrace))
    });

    let mut trace = MemoryTrace::memory();
    Engine::sim(forced.clone(), PROMPT).run(PROMPT, &mut trace);
    let text = String::from_utf8(trace.bytes().to_vec()).unwrap();
    c.bench_function("verify_trace_4_rounds", |b| b.iter(|| verify_trace(black_box(&text)).unwrap()));
}

criterion_group!(benches, refinement, grounding, runs);
criterion_main!(benches);
