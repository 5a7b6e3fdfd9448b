//! Command-line front end for the luminav localization engine.
//!
//! Five subcommands cover the full loop: `simulate` writes synthetic
//! datasets, `localize` runs retrieval plus the confidence-gated
//! localization loop, `evaluate` scores trajectories, `retrieve` inspects
//! the place-recognition stage, and `bench` measures per-stage latency.
//!
//! Everything is deterministic given `--seed` (timing measurements aside):
//! identical invocations produce byte-identical artifacts.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
