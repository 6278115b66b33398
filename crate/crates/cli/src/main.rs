use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;

use args::{Cli, Command};
use glot_core::GlotError;

/// Process exit statuses.
pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

fn exit_code(e: &GlotError) -> u8 {
    match e {
        GlotError::Divergence { .. } | GlotError::NonFinite { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let argv = match args::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Crossval(a) => commands::crossval(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::BenchAttn(a) => commands::bench_attn(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
