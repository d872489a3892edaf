use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use emfluct::config::ExperimentConfig;
use emfluct::manifest::VerifyStatus;

#[derive(Parser)]
#[command(name = "emfluct", version, about = "EM-scheme fluctuation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a flat key-value config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override master_seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the worker count (affects speed only, never results).
        #[arg(long)]
        threads: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the checksums of every output a manifest lists.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            threads,
            out,
        } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read config {}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            let parsed = match ExperimentConfig::parse(&text) {
                Ok(c) => c.with_overrides(seed, threads, out),
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            match emfluct::run_experiment(&parsed) {
                Ok(manifest) => {
                    let mut stdout = std::io::stdout();
                    if emfluct::emit_summary(&manifest, &mut stdout).is_err() {
                        return ExitCode::from(1);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Verify { manifest } => match emfluct::verify_manifest(&manifest) {
            Ok(results) => {
                let mut ok = true;
                for (path, status) in &results {
                    match status {
                        VerifyStatus::Ok => println!("{path:<36} ok"),
                        VerifyStatus::Missing => {
                            ok = false;
                            println!("{path:<36} MISSING");
                        }
                        VerifyStatus::Mismatch { expected, actual } => {
                            ok = false;
                            println!("{path:<36} MISMATCH expected {expected} got {actual}");
                        }
                    }
                }
                if ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("cannot verify manifest: {e}");
                ExitCode::from(1)
            }
        },
    }
}
