mod args;
mod commands;
mod frontier;
mod pipeline;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::commands::Outcome;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Design(a) => commands::design(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Simulate(a) => commands::simulate_cmd(a),
        Command::ValueDump(a) => commands::value_dump(a),
        Command::Verify(a) => commands::verify(a),
        Command::Frontier(a) => frontier::frontier(a),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(1),
        Ok(Outcome::BestEffort) => ExitCode::from(4),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
