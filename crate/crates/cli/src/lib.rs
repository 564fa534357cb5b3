//! The `dfkit` command-line driver.

pub mod args;
mod commands;
pub mod config;
mod svg;

use args::{Cli, Command};
use dfkit_core::Error;

pub use commands::verdict_line;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Predict(a) => commands::predict(a),
        Command::Report(a) => commands::report(a),
    }
}

/// Process exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_USAGE,
        Some(Error::NonFiniteLoss { .. }) => EXIT_DIVERGED,
        Some(Error::Checkpoint(_)) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}
