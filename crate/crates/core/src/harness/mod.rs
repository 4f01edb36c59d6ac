//! Experiment plumbing: scenario configs, multi-seed runs, results tables,
//! flow censuses and SVG charts.

mod census;
mod config;
mod plot;
mod run;

pub use census::{flow_census, FlowCensus};
pub use config::{load_config, BlockSpec, NetworkConfig, RandomBlocks, ScenarioConfig, PRESETS};
pub use plot::{
    band, census_svg, indicator_svg, write_census_plots, write_indicator_plots, Band, Indicator,
};
pub use run::{
    demand_for, evaluate, make_env, read_records, run_experiment, run_seed, run_seeds,
    training_log_line, write_records, write_trace, write_training_log, EvalReport, RunRecord,
    SeedRun,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad input: unreadable or invalid configuration, unknown names.
    #[error("config error: {0}")]
    Config(String),
    /// Anything that goes wrong after the inputs were accepted.
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 1 for configuration problems, 2 for the rest.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            _ => 2,
        }
    }
}

impl From<crate::agents::AgentError> for HarnessError {
    fn from(e: crate::agents::AgentError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}
