//! Experiment orchestration and persistence.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod output;

pub use analysis::{decay_fit, recenter, DecayFit, DecayReport, RecenterRecord, RecenterSummary};
pub use config::{load_config, parse_config, parse_overrides, resolve, ExperimentConfig};
pub use experiment::{
    run_experiment, start_close_stay_close, ExperimentOutput, ExperimentReport, ExperimentStatus, SeriesRow,
    SweepReport,
};
