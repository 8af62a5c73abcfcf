use std::path::{Path, PathBuf};
use std::process::exit;

use clap::{Parser, Subcommand};

use wtorus_cli::config::Manifest;
use wtorus_cli::CliError;

/// Experiment runner for weighted-lattice elliptic problems, homogenization
/// studies, and exclusion-process hydrodynamics.
#[derive(Parser)]
#[command(name = "wtorus", version, about)]
struct Cli {
    /// Worker threads for commands with independent replicas or seeds;
    /// outputs do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory for artifacts; defaults to $WTORUS_OUTPUT_DIR, then the
    /// current directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One elliptic solve, solution written per site
    Solve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Error ladder across grid sizes against a reference solution
    Converge {
        #[arg(long)]
        config: PathBuf,
    },
    /// Ladder study for lattice-scale periodic coefficients against the
    /// averaged limit
    Homogenize {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-seed effective-coefficient fits for random environments
    RandomHomogenize {
        #[arg(long)]
        config: PathBuf,
    },
    /// Monte Carlo particle runs against the limiting PDE
    Hydro {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-run the command recorded in a manifest
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn load_json(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{} is not valid JSON: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out_dir = cli
        .output_dir
        .or_else(|| std::env::var_os("WTORUS_OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let (command, raw) = match &cli.cmd {
        Cmd::Solve { config } => ("solve".to_string(), load_json(config)?),
        Cmd::Converge { config } => ("converge".to_string(), load_json(config)?),
        Cmd::Homogenize { config } => ("homogenize".to_string(), load_json(config)?),
        Cmd::RandomHomogenize { config } => ("random-homogenize".to_string(), load_json(config)?),
        Cmd::Hydro { config } => ("hydro".to_string(), load_json(config)?),
        Cmd::Rerun { manifest } => {
            let manifest: Manifest = serde_json::from_value(load_json(manifest)?)
                .map_err(|e| CliError::Config(format!("invalid manifest: {e}")))?;
            (manifest.command, manifest.config)
        }
    };
    let outcome = wtorus_cli::execute(&command, raw, cli.jobs, &out_dir)?;
    println!(
        "{command}: wrote {} to {}",
        outcome.artifacts.join(", "),
        outcome.out_dir.display()
    );
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version are successes; anything else is a usage
            // problem and exits like a config error
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{e}");
            exit(e.exit_code());
        }
    }
}
