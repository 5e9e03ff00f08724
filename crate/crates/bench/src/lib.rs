//! Criterion benchmarks for the hot paths of `comgen-core`; see `benches/`.
