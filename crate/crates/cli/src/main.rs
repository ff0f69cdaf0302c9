mod args;
mod commands;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use args::{Cli, Command, ReplayArgs};
use commands::Resolved;
use error::{CliError, CliResult};
use manifest::{compare_outputs, RunManifest};

fn run_resolved(cmd: &Resolved, out: &Path) -> CliResult<RunManifest> {
    let start = Instant::now();
    let outputs = cmd.execute(out)?;
    let manifest = RunManifest::new(cmd, out, &outputs, start.elapsed().as_secs_f64())?;
    manifest.write(out)?;
    Ok(manifest)
}

fn replay(a: &ReplayArgs) -> CliResult<()> {
    let recorded = RunManifest::read(&a.manifest)?;
    let out: PathBuf = match &a.out {
        Some(o) => o.clone(),
        None => a.manifest.parent().unwrap_or(Path::new(".")).join("replay"),
    };
    let rerun = run_resolved(&recorded.command, &out)?;
    let diffs = compare_outputs(&recorded.outputs, &rerun.outputs);
    if !diffs.is_empty() {
        return Err(CliError::precondition(format!("replay differs: {}", diffs.join(", "))));
    }
    println!("replay of {} reproduced {} output file(s)", recorded.command.name(), rerun.outputs.len());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let (cmd, out) = match cli.command {
        Command::VerifyTheory(f) => commands::resolve_theory(f.merged()?)?,
        Command::GenModel(f) => commands::resolve_gen_model(f.merged()?)?,
        Command::GenData(f) => commands::resolve_gen_data(f.merged()?)?,
        Command::Calibrate(f) => commands::resolve_calibrate(f.merged()?)?,
        Command::Evaluate(f) => commands::resolve_evaluate(f.merged()?)?,
        Command::Ablate(f) => commands::resolve_ablate(f.merged()?)?,
        Command::Replay(a) => return replay(&a),
    };
    let manifest = run_resolved(&cmd, &out)?;
    println!("{} wrote {} file(s) to {}", cmd.name(), manifest.outputs.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_new(&cli.log).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("noisyquant: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
