use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use meshsim_cli::{
    compare_files, render_gaps, resolve_output_dir, run_experiment, CliResult, ExperimentSpec,
    OUTPUT_DIR_ENV,
};

/// Runs and compares asynchronous mesh-training simulations.
#[derive(Parser)]
#[command(name = "meshsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every grid point of a spec.
    Run {
        spec: PathBuf,
        /// Where results go; overrides the spec's `output_dir`.
        #[arg(long, short, env = OUTPUT_DIR_ENV)]
        output_dir: Option<PathBuf>,
        /// Override a mesh field, e.g. `--set averaging.async_delay=5`. Repeatable.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-step consensus-loss and consensus-error gaps between two trajectory files.
    Compare { a: PathBuf, b: PathBuf },
    /// Parse a spec and resolve its grid without running anything.
    Validate {
        spec: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
}

fn load(spec: &PathBuf, overrides: &[String], seed: Option<u64>) -> CliResult<ExperimentSpec> {
    let mut s = ExperimentSpec::load(spec)?;
    for o in overrides {
        s.apply_override(o)?;
    }
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run {
            spec,
            output_dir,
            overrides,
            seed,
        } => {
            let s = load(&spec, &overrides, seed)?;
            let out = resolve_output_dir(output_dir, &s);
            eprintln!("{}: {} grid point(s) -> {}", s.name, s.grid_size(), out.join(&s.name).display());
            let summaries = run_experiment(&s, &out)?;
            println!("index,overrides,final_consensus_loss,final_consensus_error,diverged");
            for p in summaries {
                println!(
                    "{},{},{:.6e},{:.6e},{}",
                    p.index, p.overrides, p.final_consensus_loss, p.final_consensus_error, p.diverged
                );
            }
        }
        Command::Compare { a, b } => print!("{}", render_gaps(&compare_files(&a, &b)?)),
        Command::Validate { spec, overrides } => {
            let s = load(&spec, &overrides, None)?;
            let grid = s.grid()?;
            println!("{}: {} grid point(s)", s.name, grid.len());
            for p in grid {
                println!("point {} seed {} config {}", p.index, p.mesh.seed, p.config_hash);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
