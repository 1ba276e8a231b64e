//! Experiment harness behind the `dspert` binary: configuration and data
//! loading, training runs, evaluation, ablation grids and pre-logit
//! analysis. Every command is also callable as a library function.

pub mod ablate;
pub mod args;
pub mod commands;
pub mod output;
pub mod splits;

pub use args::{Cli, Command};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    commands::dispatch(cli.command)
}
