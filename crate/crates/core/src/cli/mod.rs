//! Config-driven experiment runner behind the `pertloss` binary.
//!
//! A run writes three files into its output directory: `results.csv` (one
//! row per trial or grid point), `summary.json` (aggregates and pass flags)
//! and `manifest.json` (the resolved configuration, loadable with
//! [`ExperimentConfig::from_manifest`]).

mod config;
mod run;

pub use config::{Experiment, ExperimentConfig, ProblemConfig};
pub use run::{
    rate_query, run, run_config, ExitStatus, Overrides, RunOutcome, DEFAULT_OUTPUT_DIR,
    OUTPUT_DIR_ENV,
};
