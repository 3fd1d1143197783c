//! `cadenza`: tokenize MIDI, train the composer and performer, generate and evaluate.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "cadenza", version, about, propagate_version = true)]
struct Cli {
    /// TOML run config (schema_version = 1); omitted keys keep their defaults.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Seed for every random draw in the run; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a MIDI file to token text, one token per line.
    Tokenize {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Drop velocity and microshift tokens.
        #[arg(long)]
        no_performance: bool,
    },
    /// Decode token text back to MIDI.
    Detokenize {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Print the vocabulary, one `id<TAB>token` line each.
    Vocab {
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Vocabulary size and mean sequence length of the standard presets over a corpus.
    Bench {
        corpus: PathBuf,
        /// Write bench.txt and bench.jsonl into this directory.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Train the composer on the score tokens of a MIDI corpus.
    TrainComposer(TrainArgs),
    /// Train the performer to fill in velocity and microshift tokens.
    TrainPerformer(TrainArgs),
    /// Generate a variation of a MIDI file with a composer checkpoint.
    Vary {
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Draw the latent from the prior instead of encoding an input.
        #[arg(long)]
        unconditional: bool,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Render velocity and microtiming for a MIDI score with a performer checkpoint.
    Perform {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Compare generated MIDI against references (files or directories).
    Metrics {
        generated: PathBuf,
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricKind::Similarity)]
        kind: MetricKind,
        /// Write metrics.txt and metrics.jsonl into this directory.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic corpus in the `[style]` config section.
    SynthCorpus {
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    corpus: PathBuf,
    /// Run directory for checkpoints, logs and the resolved config.
    #[arg(long, short)]
    output: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Shorthand for `--set train.steps=N`.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Clone, Copy)]
struct DecodeArgs {
    /// Nucleus sampling with the `[generate]` temperature and top_p instead of greedy decoding.
    #[arg(long)]
    sample: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricKind {
    /// Pitch, onset and duration cosine plus exact-note similarity.
    Similarity,
    /// Velocity and microtiming histogram divergence.
    Fidelity,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let args: Vec<String> = std::iter::once("cadenza".to_string()).chain(std::env::args().skip(1)).collect();
    let mut sets = cli.sets.clone();
    if let Command::TrainComposer(t) | Command::TrainPerformer(t) = &cli.command {
        if let Some(steps) = t.steps {
            sets.push(format!("train.steps={steps}"));
        }
    }
    let config = RunConfig::resolve(cli.config.as_deref(), &sets, cli.seed)?;
    commands::run(cli.command, config, &args)
}
