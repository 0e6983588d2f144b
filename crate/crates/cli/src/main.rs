use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlrda::weights::Variant;
use tlrda_cli::commands::{cmd_crossover, cmd_fit, cmd_robustness, cmd_simulate, cmd_validate, Overrides};
use tlrda_cli::config::GridSpec;

/// Transfer-learning regularized discriminant analysis.
#[derive(Parser)]
#[command(name = "tlrda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draws training populations and a target test set, writing CSVs and a manifest.
    Simulate(Common),
    /// Fits the transfer classifiers to a manifest of CSV files.
    Fit(FitArgs),
    /// Compares limiting errors with Monte Carlo errors over a lambda grid.
    Validate(ExperimentArgs),
    /// Sweeps the aspect ratio for the pooled-versus-individual comparison.
    Crossover(Common),
    /// Runs the covariance-shift experiment.
    Robustness(ExperimentArgs),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset manifest, overriding the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Variant to fit; repeatable.
    #[arg(long = "variant")]
    variants: Vec<Variant>,
    /// Log-spaced lambda grid `a:b:n`.
    #[arg(long)]
    lambda_grid: Option<GridSpec>,
    /// Cross-validation folds on the target population.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    /// Variant to include; repeatable.
    #[arg(long = "variant")]
    variants: Vec<Variant>,
    /// Log-spaced lambda grid `a:b:n`.
    #[arg(long)]
    lambda_grid: Option<GridSpec>,
    /// Monte Carlo replicates.
    #[arg(long)]
    reps: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(c) => cmd_simulate(c.config.as_deref(), &overrides(&c, Overrides::default()), &c.out),
        Command::Crossover(c) => cmd_crossover(c.config.as_deref(), &overrides(&c, Overrides::default()), &c.out),
        Command::Fit(a) => {
            let o = Overrides {
                lambda_grid: a.lambda_grid,
                variants: a.variants,
                folds: a.folds,
                manifest: a.manifest,
                ..Default::default()
            };
            cmd_fit(a.common.config.as_deref(), &overrides(&a.common, o), &a.common.out)
        }
        Command::Validate(a) => {
            let o = experiment_overrides(&a);
            cmd_validate(a.common.config.as_deref(), &o, &a.common.out)
        }
        Command::Robustness(a) => {
            if !a.variants.is_empty() {
                eprintln!("tlrda: --variant is ignored by robustness");
            }
            let o = experiment_overrides(&a);
            cmd_robustness(a.common.config.as_deref(), &o, &a.common.out)
        }
    };
    match result {
        Ok(report) => {
            eprintln!("tlrda: {} finished", report.command);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tlrda: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn overrides(c: &Common, rest: Overrides) -> Overrides {
    Overrides { seed: c.seed, ..rest }
}

fn experiment_overrides(a: &ExperimentArgs) -> Overrides {
    overrides(
        &a.common,
        Overrides {
            lambda_grid: a.lambda_grid,
            reps: a.reps,
            variants: a.variants.clone(),
            ..Default::default()
        },
    )
}
