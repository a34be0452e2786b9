//! `bridgekit` command-line runner.

mod config;
mod experiments;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "bridgekit", version, about = "Schrödinger bridge experiments with reproducible outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its outputs plus a manifest.
    Run {
        /// Experiment name; may also come from the config file.
        experiment: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parameter override `key=value`, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Re-hash the files of a run and re-check cheap invariants.
    Verify {
        /// Manifest file or run directory.
        path: PathBuf,
    },
    /// List experiments.
    List,
}

fn init_threads() {
    if let Some(n) = std::env::var("BRIDGEKIT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    let result = match cli.command {
        Command::List => {
            for (name, about) in experiments::CATALOGUE {
                println!("{name:<16} {about}");
            }
            Ok(())
        }
        Command::Run { experiment, config, seed, out, set } => ExperimentConfig::assemble(experiment, config, seed, out, &set)
            .and_then(|cfg| experiments::run(&cfg))
            .map(|m| println!("wrote {} files to {}", m.files.len(), m.out_dir.display())),
        Command::Verify { path } => manifest::verify(&path).map(|n| println!("ok: {n} files verified")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
