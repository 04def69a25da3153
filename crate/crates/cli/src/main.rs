use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use dwe_lab::{Cache, ExperimentConfig, Run};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Subcommand {
    Spectrum,
    ResolventScan,
    TubeMass,
    Pressure,
    Egorov,
    Cylinders,
    Decay,
    All,
}

impl Subcommand {
    fn name(self) -> &'static str {
        match self {
            Subcommand::Spectrum => "spectrum",
            Subcommand::ResolventScan => "resolvent-scan",
            Subcommand::TubeMass => "tube-mass",
            Subcommand::Pressure => "pressure",
            Subcommand::Egorov => "egorov",
            Subcommand::Cylinders => "cylinders",
            Subcommand::Decay => "decay",
            Subcommand::All => "all",
        }
    }
}

/// Numerical laboratory for the damped wave equation on conformal 2-tori.
#[derive(Parser, Debug)]
#[command(name = "dwe-lab", version)]
struct Cli {
    subcommand: Subcommand,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Neither read nor write the result cache.
    #[arg(long)]
    no_cache: bool,
    /// Worker threads for the global pool.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("warning: thread pool already initialised: {e}");
        }
    }
    let cache = if cli.no_cache || !cfg.cache { Cache::disabled() } else { Cache::from_env(&cfg.out) };
    let run = Run::new(&cfg, &cache);
    match run.execute_and_write(cli.subcommand.name()) {
        Ok(report) => {
            print!("{}", report.summary_table());
            for n in &report.notes {
                println!("note: {n}");
            }
            if report.hard_failures() > 0 {
                eprintln!("{} hard check(s) failed", report.hard_failures());
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
