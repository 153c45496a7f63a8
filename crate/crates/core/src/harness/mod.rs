//! Scenario configuration, pipelines and result emission.

pub mod config;
pub mod pipeline;
pub mod records;

pub use config::{desk_scale, paper_scale, preset, ScenarioConfig, SimSource};
pub use records::{Provenance, ResultRecord};
