//! Library side of the `pipeserve` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod units;

pub use commands::{cmd_plan, cmd_serve, cmd_simulate, cmd_sweep, write_outputs, SweepAxis};
pub use config::RunConfig;
pub use error::CliError;
