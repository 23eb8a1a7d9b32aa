use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cues_cli::commands::{run_chat, run_eval, run_freq, ChatArgs, EvalArgs, FreqArgs};
use cues_cli::service::{run_serve, ServeArgs};
use cues_cli::CliError;

/// Counseling dialogue with SAFE non-verbal cues: chat, score, serve.
#[derive(Debug, Parser)]
#[command(name = "cues", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Interactive session in the terminal.
    Chat(ChatArgs),
    /// Alignment report for a ground-truth dataset.
    Eval(EvalArgs),
    /// Cue frequency distributions for a dataset.
    Freq(FreqArgs),
    /// HTTP API and web console.
    Serve(ServeArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Chat(args) => run_chat(&args, std::io::stdin().lock(), std::io::stdout().lock()),
        Command::Eval(args) => run_eval(&args).map(|table| print!("{table}")),
        Command::Freq(args) => run_freq(&args).map(|bars| print!("{bars}")),
        Command::Serve(args) => {
            tracing_subscriber::fmt().with_writer(std::io::stderr).init();
            run_serve(&args)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
