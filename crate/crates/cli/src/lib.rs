//! Scenario driver: typed configuration, mode dispatch and reproducible
//! reports for the `edg` binary.

pub mod config;
pub mod report;
pub mod scenario;

pub use config::{ConfigError, Mode, RawConfig, ScenarioConfig};
pub use report::{ManifestEntry, RunReport};
pub use scenario::{run_scenario, CliError};
