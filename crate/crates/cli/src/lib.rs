//! Benchmark harness behind the `flowhpc` command.

pub mod harness;
pub mod report;
