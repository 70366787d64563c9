//! `csa-ts`: train and evaluate time-series classifiers with
//! class-specific attention, reproduce the comparison/ablation protocol,
//! and export feature matrices.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csa_cli::{ExperimentConfig, Overrides};
use csa_core::error::Error;

#[derive(Parser)]
#[command(
    name = "csa-ts",
    version,
    about = "Time-series classification with class-specific attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExpArgs {
    /// key=value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training split (.ts or .csv)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test split (.ts or .csv)
    #[arg(long)]
    test: Option<PathBuf>,
    /// Model variant: baseline | csa | csa-nocd
    #[arg(long)]
    variant: Option<String>,
    /// Training epochs (default 400)
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Adam learning rate (default 1e-3)
    #[arg(long)]
    lr: Option<f64>,
    /// Key/query space width (default 64)
    #[arg(long)]
    fa: Option<usize>,
    /// Comma-separated seed list (default 0,1,2,3,4)
    #[arg(long)]
    seeds: Option<String>,
    /// Disable per-instance z-normalisation
    #[arg(long = "no-znorm")]
    no_znorm: bool,
    /// Global-attention update policy: latest | ema
    #[arg(long = "attn-update")]
    attn_update: Option<String>,
    /// Output directory (default ./results)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExpArgs {
    fn resolve(&self) -> csa_core::Result<ExperimentConfig> {
        let flags = Overrides {
            train: self.train.clone(),
            test: self.test.clone(),
            variant: self.variant.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            f_a: self.fa,
            seeds: self.seeds.clone(),
            no_znorm: self.no_znorm,
            attn_update: self.attn_update.clone(),
            out: self.out.clone(),
        };
        ExperimentConfig::resolve(self.config.as_deref(), &flags)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant across seeds; writes runs.jsonl and checkpoints
    Train(ExpArgs),
    /// Evaluate a checkpoint on a test split (labels only used for scoring)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long = "no-znorm")]
        no_znorm: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline vs CSA across seeds: accuracies, AI, chi-square verdict
    Compare(ExpArgs),
    /// CSA vs CSA-without-CD across seeds (class-differentiation ablation)
    Ablate(ExpArgs),
    /// Export time-pooled feature matrices (before/after attention) as CSV
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Instances to export, .ts or .csv
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "no-znorm")]
        no_znorm: bool,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Generate the synthetic three-class dataset as TRAIN/TEST .ts files
    GenSynthetic {
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        /// Series length
        #[arg(long, default_value_t = 10)]
        t: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> csa_core::Result<String> {
    match &cli.command {
        Command::Train(args) => csa_cli::cmd_train(&args.resolve()?),
        Command::Eval {
            checkpoint,
            test,
            no_znorm,
            out,
        } => csa_cli::cmd_eval(checkpoint, test, !no_znorm, out.as_deref()),
        Command::Compare(args) => csa_cli::cmd_compare(&args.resolve()?),
        Command::Ablate(args) => csa_cli::cmd_ablate(&args.resolve()?),
        Command::ExportFeatures {
            checkpoint,
            data,
            no_znorm,
            out,
        } => csa_cli::cmd_export_features(checkpoint, data, !no_znorm, out),
        Command::GenSynthetic {
            n_per_class,
            t,
            noise_std,
            seed,
            out,
        } => csa_cli::cmd_gen_synthetic(*n_per_class, *t, *noise_std, *seed, out),
    }
}

fn main() -> ExitCode {
    csa_core::threading::init_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(output) => {
            print!("{output}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
