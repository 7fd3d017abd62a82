use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use pklic::ResponseFamily;
use pklic_cli::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "pklic",
    version,
    about = "Penalized KLIC model selection for longitudinal GMM models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate feedback panels and compare the five scenario models.
    Simulate(Flags),
    /// Fit one model: two-step GMM, tilting, penalized criteria.
    Fit(Flags),
    /// Fit and rank every candidate model.
    Select(Flags),
    /// Re-rank fit terms over grids of penalty multipliers.
    Sensitivity(Flags),
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Binary,
    Continuous,
}

#[derive(Args)]
struct Flags {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    c_mppp: Option<f64>,
    #[arg(long)]
    c_lp: Option<f64>,
    /// Output directory (default: current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
    /// `power-set` or a JSON file of `{"id", "covariates"}` entries.
    #[arg(long)]
    candidates: Option<String>,
    /// CSV `model_id,fit_term,k,j` to replay instead of fitting.
    #[arg(long)]
    fit_terms: Option<PathBuf>,
    /// Observation count N for replayed fit terms.
    #[arg(long)]
    n_obs: Option<usize>,
    /// Worker threads (default: all cores). Does not change results.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Comma-separated covariates of the model for `fit`.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    c_mppp_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    c_lp_grid: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    family: Option<Family>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    times: Option<usize>,
    /// Also write the first N simulated panels as CSV.
    #[arg(long)]
    export_panels: Option<usize>,
}

impl Flags {
    fn resolve(self) -> Result<RunConfig> {
        let overrides = Overrides {
            seed: self.seed,
            c_mppp: self.c_mppp,
            c_lp: self.c_lp,
            out: self.out,
            replicates: self.replicates,
            candidates: self.candidates,
            fit_terms: self.fit_terms,
            n_obs: self.n_obs,
            workers: self.workers,
            data: self.data,
            metadata: self.metadata,
            covariates: self.covariates,
            c_mppp_grid: self.c_mppp_grid,
            c_lp_grid: self.c_lp_grid,
            family: self.family.map(|f| match f {
                Family::Binary => ResponseFamily::Binary,
                Family::Continuous => ResponseFamily::Continuous,
            }),
            subjects: self.subjects,
            times: self.times,
            export_panels: self.export_panels,
        };
        RunConfig::resolve(self.config.as_deref(), overrides)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (run, flags): (fn(&RunConfig) -> Result<pklic_cli::Outcome>, Flags) = match cli.command {
        Command::Simulate(f) => (pklic_cli::simulate, f),
        Command::Fit(f) => (pklic_cli::fit, f),
        Command::Select(f) => (pklic_cli::select, f),
        Command::Sensitivity(f) => (pklic_cli::sensitivity, f),
    };
    let cfg = flags.resolve()?;
    let outcome = run(&cfg)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", outcome.written.json.display());
    println!("{}", outcome.written.csv.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
