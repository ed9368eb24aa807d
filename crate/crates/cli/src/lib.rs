//! Configuration parsing and experiment orchestration behind the `lctt` binary.

pub mod config;
pub mod experiment;

pub use config::{parse_config, parse_config_str, RunConfig};
pub use experiment::{eval_checkpoint, rdd_from_trace, read_manifest, run_experiment, EvalReport, Manifest};
