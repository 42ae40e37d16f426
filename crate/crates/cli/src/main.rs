mod args;
mod commands;
mod record;

use std::process::ExitCode;

use anyhow::{Context, Result};
use cbdrive_core::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use record::{RunContext, UsageError};

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&argv);
    let result = std::env::current_dir()
        .context("reading the working directory")
        .and_then(|cwd| dispatch(cli.command, RunContext { argv, cwd }));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

fn dispatch(command: Command, ctx: RunContext) -> Result<()> {
    match command {
        Command::GenData(a) => commands::gen_data(&a, &ctx),
        Command::Curate(a) => commands::curate(&a, &ctx),
        Command::Train(a) => commands::train(&a, &ctx),
        Command::Eval(a) => commands::eval(&a, &ctx),
        Command::Explain(a) => commands::explain(&a, &ctx),
        Command::Ablate(a) => commands::ablate(&a, &ctx),
        Command::Bench(a) => commands::bench(&a, &ctx),
        Command::Replay(a) => {
            let (command, ctx) = record::replay(&a)?;
            if let Command::Replay(_) = command {
                return Err(UsageError("a run.json cannot record a replay".into()).into());
            }
            dispatch(command, ctx)
        }
    }
}

/// The cause chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// 2 usage, 3 data or format, 4 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<cbdrive_core::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            };
        }
    }
    3
}
