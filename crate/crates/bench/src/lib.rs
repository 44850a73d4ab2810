//! Criterion benchmarks for crtlab hot paths; see `benches/`.
