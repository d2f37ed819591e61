//! Criterion benchmarks for the simulator and training primitives; see `benches/`.
