use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crepe_cli::{load_config, run_all, run_stage, Overrides, Stage, StageOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "crepe",
    about = "Scene graph predicate classification pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Union feature mode: visual, visual-language, pseudo-k or crepe.
    #[arg(long)]
    mode: Option<String>,
    /// Retrieval depth for pseudo-labels.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or ingest the dataset artifacts.
    Ingest(Common),
    /// Build the triplet vocabulary from training annotations.
    BuildVocab(Common),
    /// Embed triplet texts and warm the region cache.
    Embed(Common),
    /// Retrieve pseudo-labels for every training relation.
    Retrieve(Common),
    /// Train the visually grounded prompt learner.
    TrainPrompts(Common),
    /// Train the translational predicate head.
    TrainHead(Common),
    /// Estimate per-predicate calibration factors on the validation split.
    Calibrate(Common),
    /// Score the test split and write the metric report.
    Evaluate(Common),
    /// Label-pair frequency baseline over the same splits.
    Baseline(Common),
    /// All stages for the configured mode, in order.
    Run(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Ingest(c)
            | Command::BuildVocab(c)
            | Command::Embed(c)
            | Command::Retrieve(c)
            | Command::TrainPrompts(c)
            | Command::TrainHead(c)
            | Command::Calibrate(c)
            | Command::Evaluate(c)
            | Command::Baseline(c)
            | Command::Run(c) => c,
        }
    }

    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Ingest(_) => Stage::Ingest,
            Command::BuildVocab(_) => Stage::BuildVocab,
            Command::Embed(_) => Stage::Embed,
            Command::Retrieve(_) => Stage::Retrieve,
            Command::TrainPrompts(_) => Stage::TrainPrompts,
            Command::TrainHead(_) => Stage::TrainHead,
            Command::Calibrate(_) => Stage::Calibrate,
            Command::Evaluate(_) => Stage::Evaluate,
            Command::Baseline(_) => Stage::Baseline,
            Command::Run(_) => return None,
        })
    }
}

fn report(outcome: &StageOutcome) {
    if outcome.skipped {
        println!("[{}] up to date", outcome.stage);
    } else {
        println!(
            "[{}] wrote {} artifact{}",
            outcome.stage,
            outcome.outputs.len(),
            if outcome.outputs.len() == 1 { "" } else { "s" }
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let common = cli.command.common();
    let overrides = Overrides {
        out: common.out.clone(),
        seed: common.seed,
        mode: common.mode.clone(),
        k: common.k,
    };
    let result = load_config(&common.config, &overrides).and_then(|cfg| {
        match cli.command.stage() {
            Some(stage) => run_stage(&cfg, stage).map(|o| vec![o]),
            None => run_all(&cfg),
        }
    });
    match result {
        Ok(outcomes) => {
            for outcome in &outcomes {
                report(outcome);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
