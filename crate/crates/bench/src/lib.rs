//! Criterion benchmarks for the recurrence kernel and the model forward
//! pass live under `benches/`; run them with `cargo bench -p sruxx-bench`.
