mod args;
mod commands;
mod config;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use args::{Cli, Command};
use config::{load_config, merge, UsageError};

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let file = cli.config.as_deref().map(load_config).transpose()?;
    let file = file.as_ref();
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&merge(a, file)?),
        Command::Train(a) => commands::train_cmd(&merge(a, file)?),
        Command::Explain(a) => commands::explain_cmd(&merge(a, file)?),
        Command::Ascent(a) => commands::ascent_cmd(&merge(a, file)?),
        Command::Heatmap(a) => commands::heatmap_cmd(&merge(a, file)?),
        Command::Eval(a) => commands::eval_cmd(&merge(a, file)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
