mod cli;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use cli::{Cli, Command, Overlay};

fn run(cli: Cli) -> anyhow::Result<()> {
    let overlay = Overlay::load(cli.config.as_deref(), cli.command.keys())?;
    log::debug!("running {}", cli.command.name());
    match cli.command {
        Command::SynthNoise(a) => commands::synth_noise(a, &overlay),
        Command::Train(a) => commands::train_cmd(a, &overlay),
        Command::Denoise(a) => commands::denoise(a, &overlay),
        Command::Evaluate(a) => commands::evaluate(a, &overlay),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
