//! Benchmarks for the planning, monitoring and episode pipeline live in `benches/`.
