//! Command-line pipelines over screenshot directories: edge partition,
//! history pruning, the spatial probe and the cost model.

pub mod args;
pub mod config;
pub mod error;
pub mod report;
pub mod run;
pub mod stub;

pub use config::{parse_config, Command, RunConfig};
pub use error::CliError;
pub use report::Report;
pub use run::execute;
