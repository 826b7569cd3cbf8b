//! Criterion benchmarks for the dispatch solvers live under `benches/`.
