//! Experiment orchestration for `crtlab`: config parsing, seeded replicate
//! sweeps, CSV/JSON persistence and SVG figures.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod csvio;
pub mod plot;
pub mod runner;

pub use config::{default_config, load_config, parse_config, ConfigError, ExperimentConfig, ExperimentKind};
pub use runner::{run_experiment, CellSummary, RunManifest};
