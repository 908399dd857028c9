//! Criterion benchmarks for the refinement engine; see `benches/engine.rs`.
