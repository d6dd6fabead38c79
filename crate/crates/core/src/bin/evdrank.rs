use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use evdrank::pipeline::{self, KbEdit, PipelineConfig, Strategy};
use evdrank::rewriter::Phase;

#[derive(Parser)]
#[command(name = "evdrank", version, about = "Entity visual description query rewriting for retrieval")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured LLM backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Warmup,
    Align,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    None,
    DetStyle,
    DesStyle,
    EvdRewriter,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum EditOp {
    Inject,
    AddSense,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled synthetic train and test corpora.
    MakeCorpus,
    /// Build the entity visual description knowledge base.
    BuildKb,
    /// Build the rewriting dataset from LLM candidates.
    BuildDqr,
    /// Train the rewriter policy.
    TrainRewriter {
        #[arg(long, value_enum)]
        phase: PhaseArg,
    },
    /// Fine-tune the retriever with random rewrites.
    FinetuneRetriever,
    /// Report Recall@1/5/10 on the test corpus.
    Evaluate {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Edit the knowledge base by hand.
    KbEdit {
        #[arg(long, value_enum)]
        op: EditOp,
        #[arg(long)]
        entity: String,
        #[arg(long)]
        sense_tag: Option<String>,
        /// Description to store; repeat for several.
        #[arg(long = "desc", required = true)]
        descriptions: Vec<String>,
        /// Tag given to an existing untagged entry when adding a sense.
        #[arg(long)]
        retag_untagged_as: Option<String>,
    },
    /// Run every stage from build-kb through evaluate.
    RunAll,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(b) = cli.backend {
        config.set("backend", match b {
            BackendArg::Mock => "mock",
            BackendArg::Remote => "remote",
        })?;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::MakeCorpus => {
            let (train, test) = pipeline::make_corpus(&config)?;
            println!("wrote {train} training and {test} test items");
        }
        Command::BuildKb => {
            let (_, stats) = pipeline::build_kb(&config, &pipeline::gateway(&config)?)?;
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::BuildDqr => {
            let report = pipeline::build_dqr(&config, &pipeline::gateway(&config)?)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::TrainRewriter { phase } => {
            let phase = match phase {
                PhaseArg::Warmup => Phase::Warmup,
                PhaseArg::Align => Phase::Align,
            };
            let r = pipeline::train_rewriter_phase(&config, phase)?;
            println!(
                "{phase:?}: {} steps, {} records used, {} skipped, loss {:.6} -> {:.6}",
                r.steps, r.records_used, r.records_skipped, r.initial_loss, r.final_loss
            );
        }
        Command::FinetuneRetriever => {
            let params = pipeline::finetune_retriever(&config)?;
            println!("encoder {} written to {}", params.version(), config.encoder.display());
        }
        Command::Evaluate { strategy } => {
            let strategies: Vec<Strategy> = match strategy {
                Some(StrategyArg::None) => vec![Strategy::None],
                Some(StrategyArg::DetStyle) => vec![Strategy::DetStyle],
                Some(StrategyArg::DesStyle) => vec![Strategy::DesStyle],
                Some(StrategyArg::EvdRewriter) => vec![Strategy::EvdRewriter],
                Some(StrategyArg::All) => Strategy::ALL.to_vec(),
                None => config.strategy.map_or_else(|| Strategy::ALL.to_vec(), |s| vec![s]),
            };
            for m in pipeline::evaluate(&config, &strategies)? {
                println!("{}", serde_json::to_string(&m)?);
            }
        }
        Command::KbEdit {
            op,
            entity,
            sense_tag,
            descriptions,
            retag_untagged_as,
        } => {
            let edit = match op {
                EditOp::Inject => KbEdit::Inject {
                    entity,
                    sense_tag,
                    descriptions,
                },
                EditOp::AddSense => KbEdit::AddSense {
                    entity,
                    sense_tag: sense_tag.context("add-sense needs --sense-tag")?,
                    descriptions,
                    retag_untagged_as,
                },
            };
            let kb = pipeline::kb_edit(&config, &edit)?;
            println!("knowledge base now at version {} with {} entries", kb.version(), kb.len());
        }
        Command::RunAll => {
            for m in pipeline::run_all(&config)? {
                println!("{}", serde_json::to_string(&m)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
