//! Benchmark-only crate; see `benches/stack.rs`.
