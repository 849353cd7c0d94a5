use std::path::PathBuf;
use std::process::ExitCode;

use batchot::{exit_code, run, ConfigFile, Experiment, Overrides};
use clap::Parser;

/// Batch optimal-transport coupling experiments.
#[derive(Debug, Parser)]
#[command(name = "batchot", version)]
struct Cli {
    experiment: Experiment,
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides BATCHOT_OUT and the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (overrides BATCHOT_THREADS and the config).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = ConfigFile::load(&cli.config).and_then(|cfg| {
        run(
            cli.experiment,
            &cfg,
            &Overrides {
                seed: cli.seed,
                out: cli.out,
                threads: cli.threads,
            },
        )
    });
    match result {
        Ok(outcome) => {
            let m = &outcome.manifest;
            println!(
                "{}: {} files in {} ({:.1} s, {} assignment solves)",
                m.experiment.name(),
                m.files.len(),
                m.config.out.as_ref().map_or(String::new(), |p| p.display().to_string()),
                m.wall_clock_seconds,
                m.solver_invocations
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
