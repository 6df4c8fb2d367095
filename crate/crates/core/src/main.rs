//! Command-line entry point: each subcommand reads a flat `key = value`
//! config, runs one experiment, and writes its artifacts plus `report.json`
//! into the output directory. Exit codes group failures for scripting:
//! 2 bad configuration or invalid values, 3 unreadable data, 4 failed audit,
//! 5 non-convergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use env_logger::Env;

use infounlearn_core::harness::{
    run_audit, run_barycenter, run_feature_unlearn, run_forget_gaussian,
    run_unlearn_classifier, ExperimentConfig, RunReport,
};

#[derive(Parser)]
#[command(
    name = "infounlearn",
    about = "Information-theoretic unlearning with auditable certificates",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file; keys not set fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the config's `seed` key.
    #[arg(long)]
    seed: Option<u64>,

    /// Directory for artifacts and the run report (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Unlearn a Gaussian component from a scalar density (synthetic data).
    ForgetGaussian(RunArgs),
    /// Unlearn a dataset slice from a classifier and emit a certificate.
    Unlearn(RunArgs),
    /// Sweep the feature-unlearning trade-off and write the frontier.
    FeatureUnlearn(RunArgs),
    /// Neutralize group information in features via the W2 barycenter.
    Barycenter(RunArgs),
    /// Recompute a certificate from dumped outputs and check the tolerance.
    Audit(RunArgs),
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::ForgetGaussian(a)
            | Command::Unlearn(a)
            | Command::FeatureUnlearn(a)
            | Command::Barycenter(a)
            | Command::Audit(a) => a,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::ForgetGaussian(_) => "forget-gaussian",
            Command::Unlearn(_) => "unlearn",
            Command::FeatureUnlearn(_) => "feature-unlearn",
            Command::Barycenter(_) => "barycenter",
            Command::Audit(_) => "audit",
        }
    }
}

fn run(cli: &Cli) -> infounlearn_core::Result<RunReport> {
    let args = cli.command.args();
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string());
    }
    std::fs::create_dir_all(&args.out)?;
    match cli.command {
        Command::ForgetGaussian(_) => run_forget_gaussian(&cfg, &args.out),
        Command::Unlearn(_) => run_unlearn_classifier(&cfg, &args.out),
        Command::FeatureUnlearn(_) => run_feature_unlearn(&cfg, &args.out),
        Command::Barycenter(_) => run_barycenter(&cfg, &args.out),
        Command::Audit(_) => run_audit(&cfg, &args.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(Env::new().filter("UNLEARN_LOG"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            println!(
                "{} ok: {} artifacts in {} ({:.2?})",
                cli.command.name(),
                report.artifacts.len(),
                cli.command.args().out.display(),
                report.wall_time
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
