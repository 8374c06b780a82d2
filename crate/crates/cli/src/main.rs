//! `selftalk`: synthesize a corpus, train, infer, evaluate and export.

mod commands;
mod config;
mod corpus;
mod plot;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig, DATA_DIR_ENV};
use selftalk::{LossWeights, LveAggregation};

#[derive(Parser, Debug)]
#[command(name = "selftalk", version, about = "Speech-driven 3D facial animation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; `infer` also accepts a `.mseq` file path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus directory; falls back to the config file, then to SELFTALK_DATA_DIR.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// LRP threshold in mesh units.
    #[arg(long, global = true)]
    mu: Option<f64>,
    #[arg(long = "lve-agg", global = true, value_enum)]
    lve_agg: Option<LveAgg>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Loss weights `rec,vel,lat,ctc`.
    #[arg(long, global = true, value_parser = config::parse_weights)]
    weights: Option<LossWeights>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LveAgg {
    Max,
    Mean,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (audio, offsets, transcripts, regions, manifest).
    Synth,
    /// Train on a corpus directory and write checkpoints under --out.
    Train {
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Animate one clip and print what the lip reader and recognizer heard.
    Infer {
        /// Checkpoint directory or its `params.stck`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Template OBJ with a `regions/` directory beside it.
        #[arg(long)]
        template: PathBuf,
    },
    /// Score predicted sequences against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        template: PathBuf,
    },
    /// Write per-frame OBJ meshes or a lip-trajectory plot.
    Export {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long, value_enum, default_value = "obj")]
        format: ExportFormat,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Obj,
    Plot,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    let overrides = Overrides {
        seed: g.seed,
        out: g.out.clone(),
        data_dir: g.data_dir.clone(),
        mu: g.mu,
        lve_aggregation: g.lve_agg.map(|a| match a {
            LveAgg::Max => LveAggregation::Max,
            LveAgg::Mean => LveAggregation::Mean,
        }),
        epochs: g.epochs,
        weights: g.weights,
    };
    let env_data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    let cfg = RunConfig::resolve(g.config.as_deref(), &overrides, env_data_dir)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg, g.out.as_deref()),
        Command::Train { resume } => commands::train(&cfg, resume.as_deref()),
        Command::Infer { checkpoint, audio, template } => commands::infer(&cfg, &checkpoint, &audio, &template),
        Command::Eval { gt, pred, template } => commands::eval(&cfg, &gt, &pred, &template),
        Command::Export { seq, template, format } => commands::export(&cfg, &seq, &template, format),
    }
}
