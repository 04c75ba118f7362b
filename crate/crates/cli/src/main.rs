use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddsde_cli::compare::{compare, Metric};
use ddsde_cli::config::{DensitySource, ExperimentConfig, MAX_SEED};
use ddsde_cli::report::{report, sig6};
use ddsde_cli::run::run_experiment;
use ddsde_cli::CliError;

#[derive(Parser)]
#[command(name = "ddsde", version, about = "Experiments on density-dependent SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the engines and diagnostics of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        density_source: Option<DensitySource>,
    },
    /// Compare the density series of two run directories.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long, value_enum, default_value = "l1")]
        metric: Metric,
        /// Overrides the threshold from run A's config.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Summarize run directories as Markdown.
    Report {
        runs: Vec<PathBuf>,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("DDSDE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Invalid(vec![format!("DDSDE_THREADS: expected a positive integer, got `{value}`")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Engine(e.to_string()))
}

fn execute(cli: Cli) -> Result<bool, CliError> {
    configure_threads()?;
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            density_source,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let (Some(src), Some(p)) = (density_source, cfg.particles.as_mut()) {
                p.density_source = src;
            }
            let out = out
                .or_else(|| cfg.output.as_ref().map(PathBuf::from))
                .ok_or_else(|| CliError::Invalid(vec!["output: no output directory (set `output` or pass --out)".into()]))?;
            let manifest = run_experiment(&cfg, &out)?;
            for c in &manifest.claims {
                let verdict = if c.pass { "pass" } else { "FAIL" };
                println!("{verdict} {}: {}", c.claim, c.detail);
            }
            let failed: Vec<&str> = manifest.claims.iter().filter(|c| !c.pass).map(|c| c.claim.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("failed certificates: {}", failed.join(", "));
            }
            println!("wrote {} artifacts to {}", manifest.artifacts.len(), out.display());
            Ok(failed.is_empty())
        }
        Command::Compare {
            run_a,
            run_b,
            metric,
            tolerance,
        } => {
            let c = compare(&run_a, &run_b, metric, tolerance)?;
            for (t, v) in &c.rows {
                println!("t={} {:?}={}", sig6(*t), c.metric, sig6(*v));
            }
            let verdict = if c.pass { "pass" } else { "FAIL" };
            println!("{verdict}: max {} (tolerance {})", sig6(c.value), sig6(c.tolerance));
            Ok(c.pass)
        }
        Command::Report { runs, out } => {
            if runs.is_empty() {
                return Err(CliError::Invalid(vec!["report: at least one run directory is required".into()]));
            }
            let doc = report(&runs)?;
            match out {
                Some(path) => std::fs::write(&path, doc).map_err(|e| CliError::io(&path, e))?,
                None => print!("{doc}"),
            }
            Ok(true)
        }
        Command::Validate { config } => {
            ExperimentConfig::load(&config)?.validate()?;
            println!("{}: ok", config.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
