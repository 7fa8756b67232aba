//! Criterion benchmarks for the estimator and the visibility index; see `benches/`.
