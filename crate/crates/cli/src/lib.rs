//! Library surface of the `blv` command-line tool, split out so integration
//! tests can drive the commands directly.

pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

pub use commands::{cmd_ablate, cmd_freq, cmd_train, run_pipeline, AblateAxis};
pub use config::{
    apply_override, config_from_value, load_config, resolve_seed, ConfigError, ExperimentConfig,
};
pub use report::{AblateSummary, FreqReport, RunReport, SCHEMA_VERSION};
