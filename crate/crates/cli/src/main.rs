use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use epidiff_cli::config::RunConfig;
use epidiff_cli::fit::{run_fit, run_summarize, run_validate, Manifest};
use epidiff_cli::simulate::{simulate, write_simulation, GenerativeConfig};
use epidiff_cli::CliError;
use epidiff_core::epi::ModelKind;

/// Environment variable holding the worker thread count.
const THREADS_VAR: &str = "EPIDIFF_THREADS";

#[derive(Parser)]
#[command(name = "epidiff", version, about = "Age-structured epidemic inference with diffusion-driven transmissibility")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct Overrides {
    #[arg(long, value_parser = ["sbm", "mbm"])]
    model: Option<String>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw synthetic data and its ground truth from a generative config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Model kind written into the generated run.toml.
        #[arg(long, value_parser = ["sbm", "mbm"])]
        model: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Fit a run config (or the manifest of an earlier run).
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rewrite summaries.csv from a results directory.
    Summarize {
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Compare cumulative infections with seroprevalence estimates.
    Validate {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        seroprevalence: PathBuf,
    },
}

fn kind(s: &str) -> Result<ModelKind, CliError> {
    Ok(s.parse()?)
}

fn load_run_config(path: &PathBuf) -> Result<RunConfig, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        let dir = path.parent().unwrap_or(std::path::Path::new("."));
        return Ok(Manifest::load(dir)?.config);
    }
    RunConfig::load(path)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            config,
            model,
            seed,
            output_dir,
        } => {
            let mut generative = GenerativeConfig::load(&config)?;
            if let Some(s) = seed {
                generative.seed = s;
            }
            let kind = model.as_deref().map(kind).transpose()?.unwrap_or(generative.kind);
            let sim = simulate(&generative)?;
            let run = write_simulation(&sim, kind, &output_dir)?;
            println!(
                "simulated {} days for {} groups, attack rate {:.3}; fit with {}",
                sim.bundle.days(),
                sim.bundle.ages.groups(),
                sim.truth.attack_rate,
                run.display()
            );
        }
        Command::Fit { config, overrides } => {
            let mut run = load_run_config(&config)?;
            if let Some(m) = overrides.model {
                run.model.kind = kind(&m)?;
            }
            if let Some(c) = overrides.chains {
                run.sampler.chains = c;
            }
            if let Some(s) = overrides.seed {
                run.sampler.seed = s;
            }
            if let Some(d) = overrides.output_dir {
                run.output.dir = d;
            }
            let report = run_fit(&run)?;
            println!(
                "{} chains x {} draws in {:.1} s; divergences {:.2}%, max R-hat {}; results in {}",
                report.output.chains.len(),
                run.sampler.sampling_iterations,
                report.manifest.wall_time_seconds,
                100.0 * report.manifest.divergence_rate,
                report.manifest.max_rhat.map_or("NA".to_string(), |r| format!("{r:.3}")),
                run.output.dir.display()
            );
        }
        Command::Summarize { output_dir } => {
            let fit = run_summarize(&output_dir)?;
            println!("summarized {} draws in {}", fit.draws.len(), output_dir.display());
        }
        Command::Validate {
            output_dir,
            seroprevalence,
        } => {
            for c in run_validate(&output_dir, &seroprevalence)? {
                let e = &c.estimate;
                println!(
                    "{} day {}: survey {} [{}, {}], model {:.0} [{:.0}, {:.0}], overlap {}",
                    e.group, e.day, e.estimate, e.lower, e.upper, c.model.median, c.model.lower95, c.model.upper95, c.overlaps
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var(THREADS_VAR).ok().and_then(|v| v.parse::<usize>().ok()) {
        epidiff_core::exec::configure_threads(n);
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
