use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use pocon_cli::config::{ConfigError, RunConfig};
use pocon_cli::{report, runner, verify};

#[derive(Parser)]
#[command(name = "pocon", version, about = "Continual self-supervised learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every method and seed of a config.
    Run {
        config: PathBuf,
        /// Run directory; defaults to $POCON_OUTPUT_ROOT/<name> or runs/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Summarize one or more run directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Output directory; defaults to the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check hashes, checkpoints and counters of a run directory.
    Verify { run_dir: PathBuf },
    /// Parse and validate a config without running it.
    Check { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<ConfigError>() {
                eprintln!("error: {ce}");
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, force } => {
            let cfg = RunConfig::load(&config)?;
            let dir = runner::output_dir(&cfg, out);
            let manifest = runner::execute(&cfg, &dir, force).with_context(|| format!("running {}", config.display()))?;
            println!("{} runs written to {} (results sha256 {})", manifest.runs.len(), dir.display(), manifest.results_sha256);
        }
        Command::Report { run_dirs, out } => {
            let out = out.unwrap_or_else(|| run_dirs[0].clone());
            for path in report::write_report(&run_dirs, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Verify { run_dir } => {
            let rep = verify::verify(&run_dir)?;
            for c in rep.failures() {
                eprintln!("FAIL {}: {}", c.name, c.detail);
            }
            println!("{}/{} checks passed", rep.checks.iter().filter(|c| c.passed).count(), rep.checks.len());
            if !rep.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Check { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{} ok (config hash {})", config.display(), cfg.hash());
        }
    }
    Ok(ExitCode::SUCCESS)
}
