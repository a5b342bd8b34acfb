//! Library face of the `pwflow` binary.
//!
//! The benchmark engine and report format live here rather than in
//! `main.rs` so tests can drive a full benchmark in-process and inspect
//! the fitted models instead of scraping stdout.

pub mod benchmark;
pub mod report;
