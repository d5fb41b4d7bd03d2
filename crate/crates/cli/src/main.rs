mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use args::{Cli, Command};
use manifest::{now, RunManifest};

fn resolve(command: &Command) -> Result<(Command, Option<std::path::PathBuf>)> {
    let Command::Replay(r) = command else {
        return Ok((command.clone(), None));
    };
    let prior = RunManifest::load(&r.manifest_path)?;
    let mut cmd = prior.command;
    if let Some(out) = &r.out {
        cmd.redirect(out);
    }
    Ok((cmd, Some(r.manifest_path.clone())))
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let (command, replayed_from, resolved) = match resolve(&cli.command) {
        Ok((c, from)) => (c, from, Ok(())),
        Err(e) => (cli.command.clone(), None, Err(e)),
    };
    let path = cli.manifest.clone().unwrap_or_else(|| RunManifest::default_path(&command));
    let mut m = RunManifest::new(command.clone(), argv);
    m.replayed_from = replayed_from;
    let result = resolved.and_then(|()| commands::execute(&command, &mut m));
    m.finished_at = now();
    match &result {
        Ok(()) => m.status = "ok".into(),
        Err(e) => {
            m.status = "error".into();
            m.error = Some(format!("{e:#}"));
        }
    }
    m.save(&path)?;
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AUTODIAL_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
