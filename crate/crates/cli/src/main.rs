use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use frk::config::RunConfig;
use frk::pipeline::{run_pipeline, Command};
use frk::FrkError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Stage {
    Simulate,
    Fit,
    Predict,
    Validate,
    Bench,
}

impl From<Stage> for Command {
    fn from(s: Stage) -> Command {
        match s {
            Stage::Simulate => Command::Simulate,
            Stage::Fit => Command::Fit,
            Stage::Predict => Command::Predict,
            Stage::Validate => Command::Validate,
            Stage::Bench => Command::Bench,
        }
    }
}

/// Fixed-rank kriging pipeline.
#[derive(Debug, Parser)]
#[command(name = "frk", version)]
struct Cli {
    #[arg(value_enum)]
    stage: Stage,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &FrkError) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: kind=usage reason={first:?}");
            return ExitCode::from(2);
        }
    };
    let result = RunConfig::load(&cli.config).and_then(|cfg| run_pipeline(cli.stage.into(), &cfg, &cli.out, cli.seed));
    match result {
        Ok(report) => {
            print!("{}", report.message);
            if !report.message.ends_with('\n') {
                println!();
            }
            for p in report.outputs {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = if e.is_numeric() { "numeric" } else { "config" };
            let reason = e.to_string().replace('\n', " ");
            eprintln!("error: kind={kind} reason={reason:?}");
            ExitCode::from(exit_code(&e))
        }
    }
}
