//! Criterion benchmarks for the driftcal pipeline; see `benches/`.
