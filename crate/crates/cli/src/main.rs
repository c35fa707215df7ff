mod args;
mod commands;
mod config;
mod exit;
mod output;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("XMATCH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| exit::usage_error(format!("XMATCH_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| exit::usage_error(e.to_string()))
}

fn run(cli: &Cli, matches: &clap::ArgMatches) -> anyhow::Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => {
            let sub = matches.subcommand_matches("train").expect("train matched");
            commands::train(a, sub)
        }
        Command::Eval(a) => commands::eval(a),
        Command::Mine(a) => commands::mine(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same definition");
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit::report(&e),
    }
}
