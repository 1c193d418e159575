//! `grm` — synthetic metric-learning workbench with covariance-driven
//! gradient rectification.
//!
//! Four subcommands cover the full loop: `gen-data` synthesizes a
//! place-retrieval dataset, `train` fits an encoder (with or without
//! gradient rectification) and writes checkpoint + epoch log + manifest,
//! `eval` measures recall at chosen depths, and `diagnose` emits spectrum
//! and eigenbasis-alignment CSVs from checkpoints or per-epoch snapshots.
//!
//! Exit codes: 0 success, 2 invalid arguments or config values, 3 runtime
//! failure (unreadable files, dimension mismatch, aborted training).

mod args;
mod commands;

use args::{Cli, Command};
use clap::Parser;

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::cmd_gen_data(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Diagnose(a) => commands::cmd_diagnose(a),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}
