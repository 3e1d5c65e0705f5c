//! The `pmfs` command-line harness, usable as a library.

pub mod args;
pub mod commands;
pub mod suite;

pub use args::{Cli, Command};
pub use commands::Outcome;

use pmfs_core::{Error, Result};

pub fn run(cli: &Cli) -> Result<Outcome> {
    let g = &cli.global;
    match &cli.command {
        Command::Summarize(a) => commands::summarize(g, a),
        Command::Train(a) => commands::cmd_train(g, a),
        Command::Eval(a) => commands::cmd_eval(g, a),
        Command::Bench(a) => commands::cmd_bench(g, a),
        Command::Gradcheck => commands::cmd_gradcheck(g),
        Command::Gen(a) => commands::cmd_gen(g, a),
        Command::Preprocess(a) => commands::cmd_preprocess(g, a),
    }
}

/// 0 on success, 2 when inputs or checks fail validation, 1 otherwise.
pub fn exit_code(r: &Result<Outcome>) -> i32 {
    match r {
        Ok(o) if o.passed => 0,
        Ok(_) => 2,
        Err(Error::Config(_) | Error::Invalid(_) | Error::Shape(_)) => 2,
        Err(_) => 1,
    }
}
