//! `readmit`: command-line driver for every stage of the two-site
//! readmission experiment.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use readmit_core::{Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "readmit", version, about = "Cross-site readmission risk modeling")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON configuration for the chosen command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic site (claims.csv, demographics.csv, labels.csv).
    Synth(commands::SynthArgs),
    /// Build the cohort CSV and audit JSON from claims.
    Cohort(commands::CohortArgs),
    /// Encode a cohort into the binary dataset container.
    Featurize(commands::FeaturizeArgs),
    /// Split, grid-search and train a local model.
    Train(commands::TrainArgs),
    /// Fit Platt scaling on the calibration fold and store it in the model.
    Calibrate(commands::CalibrateArgs),
    /// Score a dataset fold into a predictions CSV.
    Predict(commands::PredictArgs),
    /// Fine-tune a local model on a remote model's soft predictions.
    Transfer(commands::TransferArgs),
    /// Compute AUROC, AUPRC and ECE from a predictions CSV.
    Evaluate(commands::EvaluateArgs),
    /// Run the full two-site experiment with bootstrap lift analysis.
    Experiment(commands::ExperimentArgs),
    /// Compare analytic gradients to finite differences.
    Gradcheck(commands::GradcheckArgs),
}

fn error_line(kind: &str, msg: &str) {
    let flat: String = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} msg={flat}");
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            error_line("usage", first);
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::from(exit_code(&e))
        }
    }
}
