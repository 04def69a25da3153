//! Experiment runner: TOML configuration, result cache, subcommand pipelines and run
//! reports for the damped-wave laboratory.

pub mod cache;
pub mod config;
pub mod pipelines;
pub mod report;

pub use cache::Cache;
pub use config::ExperimentConfig;
pub use pipelines::Run;
pub use report::RunReport;
