//! Criterion benchmarks for the hot paths of the pipeline; run with `cargo bench -p ctbert-bench`.
