//! Command-line surface: tuning, held-out benchmarks, simulation protocols
//! and the `hermit` argument parser.

pub mod app;
pub mod bench;
pub mod protocols;
pub mod tune;

pub use app::{run, Cli};
