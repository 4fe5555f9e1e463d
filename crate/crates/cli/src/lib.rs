//! Scenario runner for the separable-function predistortion toolkit.
//!
//! Scenarios are TOML files (see `scenarios/` at the repository root) that
//! describe a waveform, an amplifier model, a predistorter shape and the
//! training settings. [`run_experiment`] trains the predistorter and writes
//! spectra, traces, the trained matrix, LUT exports and a `report.toml`
//! listing every file it produced.

pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;

pub use compare::{compare_reports, compare_runs, Comparison};
pub use config::ExperimentConfig;
pub use error::CliError;
pub use experiment::{load_report, run_experiment, ExperimentResult, RunReport};
