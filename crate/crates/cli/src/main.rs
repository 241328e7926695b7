mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rankvqa::AblationVariant;

#[derive(Parser)]
#[command(name = "rankvqa", version, about = "Generate, train, evaluate and ablate multimodal ranking VQA models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Shared {
    /// JSON file of flat dotted keys, e.g. {"train.learning_rate": 0.01}
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; data, init, dropout and shuffle seeds derive from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (generate) or directory (other commands)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset file (.jsonl); without it the synthetic task is generated in memory
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Set any config key, repeatable: --set train.batch_size=32
    #[arg(long = "set", value_name = "KEY=JSON", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and print its summary
    Generate {
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Train with early stopping; writes checkpoints, log.jsonl and config.json
    Train {
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        lambda_rank: Option<f64>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Print the evaluation report of a checkpoint as JSON
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which part of the seeded split to score
        #[arg(long, value_enum, default_value_t = commands::Part::All)]
        split: commands::Part,
        #[command(flatten)]
        shared: Shared,
    },
    /// Compare analytic and finite-difference gradients on small models
    Gradcheck {
        /// Number of seeds, starting at the top-level seed
        #[arg(long)]
        seeds: Option<u64>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Train every variant on every seed and compare mean test accuracy
    Ablate {
        /// Comma-separated: full,no_ranking,no_fusion,single_head,baseline
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<AblationVariant>>,
        /// Comma-separated seed list
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[command(flatten)]
        shared: Shared,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
