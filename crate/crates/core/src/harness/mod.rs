//! Experiment orchestration: configuration, persistence, evaluation and the
//! composite experiments built on them.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod experiments;
pub mod selftest;

pub use checkpoint::Role;
pub use eval::EvalMetrics;
