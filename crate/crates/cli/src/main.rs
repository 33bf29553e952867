mod args;
mod commands;
mod failure;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::Parser;

use args::{Cli, Command, Invocation};
use failure::Failure;
use manifest::RunManifest;

const THREADS_VAR: &str = "CONFRANK_THREADS";

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::usage(format!("{THREADS_VAR} must be a non-negative integer, got `{raw}`")))?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::usage(format!("{THREADS_VAR}: {e}")))?;
    }
    Ok(())
}

/// Runs a resolved command, bracketing it with manifest writes when it has
/// an output directory.
fn run_invocation(invocation: Invocation) -> Result<(), Failure> {
    let inputs = manifest::digest_inputs(&commands::inputs(&invocation))?;
    let config = commands::train_config(&invocation)?;
    let Some(out) = invocation.out().map(|p| p.to_path_buf()) else {
        let (_, stdout) = commands::execute(&invocation, config.as_ref())?;
        println!("{stdout}");
        return Ok(());
    };
    std::fs::create_dir_all(&out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
    let mut manifest = RunManifest::start(invocation.clone(), config.clone(), inputs);
    manifest.write(&out)?;
    let result = commands::execute(&invocation, config.as_ref());
    manifest.finish(&result.as_ref().map(|(files, _)| files.clone()).map_err(Failure::clone));
    manifest.write(&out)?;
    let (_, stdout) = result?;
    println!("{stdout}");
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    let invocation = match command {
        Command::Replay(replay) => {
            let recorded = RunManifest::read(&replay.manifest)?;
            recorded.verify_inputs()?;
            let mut invocation = recorded.invocation;
            invocation.set_out(replay.out);
            invocation
        }
        other => args::resolve(other)?,
    };
    run_invocation(invocation)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return match err.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Err(failure) = configure_threads().and_then(|()| run(cli.command)) {
        eprintln!("error: {failure}");
        return failure.exit_code();
    }
    ExitCode::SUCCESS
}
