//! Criterion benchmarks for adapterlab. See `benches/`.
