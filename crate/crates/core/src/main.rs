use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use odvff::config::ExperimentConfig;
use odvff::error::Error;
use odvff::runner::{resolve_output_dir, run_experiment, Checkpoint};

#[derive(Parser)]
#[command(name = "odvff", version, about = "Sparse variational GP experiments with Fourier features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and replication in an experiment file.
    Run {
        config: PathBuf,
        /// Worker threads for independent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory (overrides the config and $ODVFF_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check an experiment file without running it.
    Validate { config: PathBuf },
    /// Summarize a saved checkpoint.
    Describe { checkpoint: PathBuf },
}

fn report(e: &Error) -> ExitCode {
    let mut body = serde_json::json!({
        "status": "error",
        "kind": e.kind(),
        "message": e.to_string(),
    });
    if let Some(f) = e.field() {
        body["field"] = f.into();
    }
    eprintln!("{body}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, jobs, out } => ExperimentConfig::load(&config).and_then(|cfg| {
            let dir = resolve_output_dir(&cfg, out.as_deref());
            let report = run_experiment(&cfg, &dir, jobs)?;
            if let Some(t) = &report.table {
                print!("{}", odvff::metrics::render_text(t));
            }
            println!("results in {}", report.out_dir.display());
            if report.failures.is_empty() {
                return Ok(ExitCode::SUCCESS);
            }
            let body = serde_json::json!({
                "status": "partial_failure",
                "failed_runs": report.failures,
            });
            eprintln!("{body}");
            Ok(ExitCode::from(3))
        }),
        Command::Validate { config } => ExperimentConfig::load(&config).map(|cfg| {
            println!("{}: ok ({} methods, {} replications)", cfg.name, cfg.methods.len(), cfg.replications);
            ExitCode::SUCCESS
        }),
        Command::Describe { checkpoint } => Checkpoint::load(&checkpoint).map(|cp| {
            print!("{}", cp.describe());
            ExitCode::SUCCESS
        }),
    };
    result.unwrap_or_else(|e| report(&e))
}
