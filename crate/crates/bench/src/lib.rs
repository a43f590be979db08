//! Benchmark-only helpers; see `benches/`.
