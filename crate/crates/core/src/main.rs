use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedgc::cli::{check_import, exit_code, export_generated, run_sweep, run_to_dir, SweepSpec};
use fedgc::config::ExperimentConfig;
use fedgc::Result;

#[derive(Parser)]
#[command(name = "fedgc", version, about = "Federated learning with client-side generated data")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write config, metrics and generated data to a directory.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every value and seed of a sweep file.
    Sweep {
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate every client's data without training and write it as one CSV.
    ExportGen {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that a pool CSV can be used as `generation.import_path`.
    ImportGen {
        file: PathBuf,
        /// Config whose task the pool must fit; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let output = run_to_dir(&cfg, &out)?;
            if let Some(last) = output.records.last() {
                println!(
                    "round {}: global_test_acc {:.4}, divergence {:.4}",
                    last.round, last.global_test_acc, last.divergence
                );
            }
        }
        Command::Sweep { sweep, out } => {
            let spec = SweepSpec::from_file(&sweep)?;
            let runs = run_sweep(&spec, &out)?;
            for run in &runs {
                if let Some(last) = run.records.last() {
                    println!("{}={} seed {}: {:.4}", spec.axis, run.axis_value, run.seed, last.global_test_acc);
                }
            }
        }
        Command::ExportGen { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let pool = export_generated(&cfg, &out)?;
            println!("wrote {} generated samples to {}", pool.len(), out.display());
        }
        Command::ImportGen { file, config } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::from_file(&path)?,
                None => ExperimentConfig::default(),
            };
            let counts = check_import(&cfg, &file)?;
            println!("{} samples, per class {:?}", counts.iter().sum::<usize>(), counts);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
