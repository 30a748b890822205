//! Experiment runner behind the `clustalign` binary: configuration, the
//! ablation and weight-sweep harnesses, comparison and artifact emission.

pub mod compare;
pub mod config;
pub mod run;

pub use compare::{compare_dirs, compare_summaries, write_compare_csv, CompareRow};
pub use config::{ConfigError, ExperimentConfig, ObjectiveBase, Overrides, Preset};
pub use run::{run, write_manifest, RunError, RunManifest, RunSummary};
