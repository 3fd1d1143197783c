use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cadenza_core::bench::{render_table, run_bench, standard_presets};
use cadenza_core::composer::{reparameterize, standard_normal, ComposerTrainer};
use cadenza_core::corpus::{segment, split, synth_corpus, write_manifest, Split};
use cadenza_core::metrics::{fidelity_report, similarity_report};
use cadenza_core::numerics::rng::{stream, STREAM_EPSILON};
use cadenza_core::numerics::Checkpoint;
use cadenza_core::performer::{masked_example, PerformerTrainer};
use cadenza_core::pertok::{strip_performance, tokens_from_text, tokens_to_text};
use cadenza_core::training::{StepRecord, TrainObserver};
use cadenza_core::{Composer, DecodeMode, Performer, Score, Tokenizer};

use crate::config::RunConfig;
use crate::io::{config_beside, read_dir, read_inputs, read_score, write_atomic, write_score};
use crate::{Command, DecodeArgs, MetricKind, TrainArgs};

pub fn run(command: Command, mut config: RunConfig, args: &[String]) -> Result<()> {
    match command {
        Command::Tokenize {
            input,
            output,
            no_performance,
        } => {
            let tok = Tokenizer::new(config.tokenizer.clone())?;
            let score = read_score(&input, config.tokenizer.ticks_per_quarter)?;
            let mut tokens = tok.encode(&score).with_context(|| format!("encoding {}", input.display()))?;
            if no_performance {
                tokens = strip_performance(&tokens);
            }
            write_atomic(&output, tokens_to_text(&tokens).as_bytes())?;
            echo(&config_beside(&output), &config, args)
        }
        Command::Detokenize { input, output } => {
            let tok = Tokenizer::new(config.tokenizer.clone())?;
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let score = tok
                .decode(&tokens_from_text(&text)?)
                .with_context(|| format!("decoding {}", input.display()))?;
            write_score(&output, &score)?;
            echo(&config_beside(&output), &config, args)
        }
        Command::Vocab { output } => {
            let text = Tokenizer::new(config.tokenizer.clone())?.vocab().to_text();
            match output {
                Some(path) => {
                    write_atomic(&path, text.as_bytes())?;
                    echo(&config_beside(&path), &config, args)
                }
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Bench { corpus, output } => bench(&corpus, output.as_deref(), &config, args),
        Command::TrainComposer(t) => train_composer(t, config, args),
        Command::TrainPerformer(t) => train_performer(t, config, args),
        Command::Vary {
            input,
            checkpoint,
            output,
            unconditional,
            decode,
        } => {
            let (model, tok_cfg) = Composer::<f32>::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
            config.tokenizer = tok_cfg;
            config.composer = model.config().clone();
            let tok = Tokenizer::new(config.tokenizer.clone())?;
            let latent = model.config().latent;
            let z = match (&input, unconditional) {
                (_, true) => standard_normal(latent, &mut stream(config.seed, &[STREAM_EPSILON])),
                (Some(path), false) => {
                    let score = read_score(path, config.tokenizer.ticks_per_quarter)?;
                    let tokens = strip_performance(&tok.encode(&score)?);
                    let ids = tok.vocab().encode_ids(&tokens)?;
                    let (mu, logvar) = model
                        .posterior(&ids)
                        .with_context(|| format!("encoding {}", path.display()))?;
                    if decode.sample {
                        let eps = standard_normal(latent, &mut stream(config.seed, &[STREAM_EPSILON]));
                        reparameterize(&mu, &logvar, &eps).z
                    } else {
                        mu
                    }
                }
                (None, false) => bail!("vary needs an input file unless --unconditional is given"),
            };
            let tokens = model.generate(&z, &tok, decode_mode(decode, &config), config.generate.max_len)?;
            write_score(&output, &tok.decode(&tokens)?)?;
            echo(&config_beside(&output), &config, args)
        }
        Command::Perform {
            input,
            checkpoint,
            output,
            decode,
        } => {
            let (model, tok_cfg) = Performer::<f32>::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
            config.tokenizer = tok_cfg;
            config.performer = model.config().clone();
            let tok = Tokenizer::new(config.tokenizer.clone())?;
            let score = read_score(&input, config.tokenizer.ticks_per_quarter)?;
            let tokens = tok.encode(&score).with_context(|| format!("encoding {}", input.display()))?;
            let performed = model
                .apply_performance(&tokens, &tok, decode_mode(decode, &config))
                .with_context(|| format!("performing {}", input.display()))?;
            let mut out = tok.decode(&performed)?;
            out.time_signature = score.time_signature;
            write_score(&output, &out)?;
            echo(&config_beside(&output), &config, args)
        }
        Command::Metrics {
            generated,
            reference,
            kind,
            output,
        } => metrics(&generated, &reference, kind, output.as_deref(), &config, args),
        Command::SynthCorpus { output, count } => {
            let scores = synth_corpus(&config.style, count)?;
            for (i, score) in scores.iter().enumerate() {
                write_score(&output.join(format!("{i:05}.mid")), score)?;
            }
            echo(&output.join("config.toml"), &config, args)?;
            eprintln!("wrote {count} files to {}", output.display());
            Ok(())
        }
    }
}

fn echo(path: &Path, config: &RunConfig, args: &[String]) -> Result<()> {
    write_atomic(path, config.echo(args).as_bytes())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn decode_mode(args: DecodeArgs, config: &RunConfig) -> DecodeMode {
    if args.sample {
        DecodeMode::Sample {
            temperature: config.generate.temperature,
            top_p: config.generate.top_p,
            seed: config.seed,
        }
    } else {
        DecodeMode::Greedy
    }
}

fn bench(corpus: &Path, output: Option<&Path>, config: &RunConfig, args: &[String]) -> Result<()> {
    let scores: Vec<Score> = read_dir(corpus, config.tokenizer.ticks_per_quarter)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let rows = run_bench(&scores, &standard_presets(config.tokenizer.ticks_per_quarter))?;
    let table = render_table(&rows);
    print!("{table}");
    if let Some(dir) = output {
        let jsonl: String = rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect();
        write_atomic(&dir.join("bench.txt"), table.as_bytes())?;
        write_atomic(&dir.join("bench.jsonl"), jsonl.as_bytes())?;
        echo(&dir.join("config.toml"), config, args)?;
    }
    Ok(())
}

fn metrics(
    generated: &Path,
    reference: &Path,
    kind: MetricKind,
    output: Option<&Path>,
    config: &RunConfig,
    args: &[String],
) -> Result<()> {
    let tpq = config.tokenizer.ticks_per_quarter;
    let (gen, refs) = (read_inputs(generated, tpq)?, read_inputs(reference, tpq)?);
    let (table, jsonl) = match kind {
        MetricKind::Similarity => {
            let pairs = if generated.is_dir() {
                gen.into_iter()
                    .map(|(name, g)| match refs.get(&name) {
                        Some(r) => Ok((name, g, r.clone())),
                        None => bail!("{name} has no counterpart under {}", reference.display()),
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                if refs.len() != 1 {
                    bail!("compare a file with a file or a directory with a directory");
                }
                let (name, g) = gen.into_iter().next().expect("one generated file");
                vec![(name, g, refs.into_values().next().expect("one reference"))]
            };
            let report = similarity_report(&pairs)?;
            (report.to_table(), report.to_jsonl())
        }
        MetricKind::Fidelity => {
            let gen: Vec<Score> = gen.into_values().collect();
            let refs: Vec<Score> = refs.into_values().collect();
            let report = fidelity_report(&gen, &refs)?;
            (report.to_table(), report.to_jsonl())
        }
    };
    print!("{table}\n{jsonl}");
    if let Some(dir) = output {
        write_atomic(&dir.join("metrics.txt"), table.as_bytes())?;
        write_atomic(&dir.join("metrics.jsonl"), jsonl.as_bytes())?;
        echo(&dir.join("config.toml"), config, args)?;
    }
    Ok(())
}

/// Excerpts of a corpus directory, split into train and test.
struct Prepared {
    train: Vec<(String, Score)>,
    manifest: String,
}

fn prepare(corpus: &Path, config: &RunConfig) -> Result<Prepared> {
    let mut excerpts = Vec::new();
    for (name, score) in read_dir(corpus, config.tokenizer.ticks_per_quarter)? {
        if config.data.segment_bars == 0 {
            excerpts.push((name, score));
            continue;
        }
        for (k, s) in segment(&score, config.data.segment_bars)?.into_iter().enumerate() {
            excerpts.push((format!("{name}#{k}"), s));
        }
    }
    let (train, test) = split(excerpts, config.data.train_ratio, config.seed)?;
    if train.is_empty() {
        bail!("no training excerpts in {}", corpus.display());
    }
    let entries: Vec<(PathBuf, Split)> = train
        .iter()
        .map(|(n, _)| (PathBuf::from(n), Split::Train))
        .chain(test.iter().map(|(n, _)| (PathBuf::from(n), Split::Test)))
        .collect();
    Ok(Prepared {
        train,
        manifest: write_manifest(&entries),
    })
}

/// Keeps sequences within the context window, or fails on the first that is not.
fn fit<T>(items: Vec<(String, Vec<T>)>, max_len: usize, skip: bool) -> Result<Vec<Vec<T>>> {
    let total = items.len();
    let mut kept = Vec::with_capacity(total);
    for (name, seq) in items {
        if seq.len() <= max_len {
            kept.push(seq);
        } else if !skip {
            bail!("{name}: {} tokens exceed max_seq_len {max_len}", seq.len());
        }
    }
    if kept.len() < total {
        eprintln!("skipped {} of {total} excerpts longer than {max_len} tokens", total - kept.len());
    }
    if kept.is_empty() {
        bail!("every excerpt exceeds max_seq_len {max_len}");
    }
    Ok(kept)
}

/// Appends step records to `log.jsonl` and writes periodic checkpoints.
struct RunLog {
    dir: PathBuf,
    log: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl RunLog {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("log.jsonl");
        let file = OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log: BufWriter::new(file),
            error: None,
        })
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e).context("writing the training log");
        }
        self.log.flush().context("writing the training log")
    }
}

impl TrainObserver for RunLog {
    fn on_step(&mut self, record: &StepRecord) {
        eprintln!("step {:>6}  loss {:.4}", record.step, record.loss);
        if let Err(e) = writeln!(self.log, "{}", record.to_json_line()) {
            self.error.get_or_insert(e);
        }
    }

    fn on_checkpoint(&mut self, step: u64, checkpoint: &Checkpoint) -> std::io::Result<()> {
        let path = self.dir.join("checkpoints").join(format!("step-{step:08}.ckpt"));
        write_atomic(&path, &checkpoint.to_bytes()).map_err(std::io::Error::other)
    }
}

/// Adopts the seed and optimizer settings of a run being resumed; only the step target stays.
fn adopt_training(ckpt: &Checkpoint, config: &mut RunConfig) -> Result<()> {
    let training = ckpt.config.get("training").context("checkpoint carries no training state")?;
    let steps = config.train.steps;
    if let Some(train) = training.get("train") {
        config.train = serde_json::from_value(train.clone()).context("checkpoint training config")?;
    }
    config.train.steps = steps;
    config.seed = training.get("seed").and_then(|s| s.as_u64()).unwrap_or(config.seed);
    config.style.seed = config.seed;
    Ok(())
}

fn train_composer(t: TrainArgs, mut config: RunConfig, args: &[String]) -> Result<()> {
    let resume = t.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ckpt) = &resume {
        let (model, tok_cfg) = Composer::<f32>::from_checkpoint(ckpt)?;
        config.tokenizer = tok_cfg;
        config.composer = model.config().clone();
        adopt_training(ckpt, &mut config)?;
    }
    let tok = Tokenizer::new(config.tokenizer.clone())?;
    config.bind_vocab(tok.vocab().len())?;
    let data = prepare(&t.corpus, &config)?;
    let sequences = data
        .train
        .into_iter()
        .map(|(name, s)| {
            let ids = tok
                .encode(&s)
                .and_then(|t| tok.vocab().encode_ids(&strip_performance(&t)))
                .with_context(|| format!("encoding {name}"))?;
            Ok((name, ids))
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = fit(sequences, config.composer.max_seq_len, config.data.skip_long)?;
    let mut trainer = match &resume {
        Some(ckpt) => {
            let mut trainer = ComposerTrainer::resume(ckpt, corpus)?;
            trainer.train.steps = config.train.steps;
            trainer
        }
        None => ComposerTrainer::new(
            config.composer.clone(),
            config.tokenizer.clone(),
            config.train.clone(),
            corpus,
            config.seed,
        )?,
    };
    write_atomic(&t.output.join("manifest.tsv"), data.manifest.as_bytes())?;
    let mut log = RunLog::open(&t.output, resume.is_some())?;
    trainer.run(&mut log)?;
    log.finish()?;
    write_atomic(&t.output.join("composer.ckpt"), &trainer.checkpoint().to_bytes())?;
    echo(&t.output.join("config.toml"), &config, args)
}

fn train_performer(t: TrainArgs, mut config: RunConfig, args: &[String]) -> Result<()> {
    let resume = t.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ckpt) = &resume {
        let (model, tok_cfg) = Performer::<f32>::from_checkpoint(ckpt)?;
        config.tokenizer = tok_cfg;
        config.performer = model.config().clone();
        adopt_training(ckpt, &mut config)?;
    }
    let tok = Tokenizer::new(config.tokenizer.clone())?;
    config.bind_vocab(tok.vocab().len())?;
    let data = prepare(&t.corpus, &config)?;
    let sequences = data
        .train
        .into_iter()
        .map(|(name, s)| {
            let tokens = tok.encode(&s).with_context(|| format!("encoding {name}"))?;
            Ok((name, tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    let examples = fit(sequences, config.performer.max_seq_len, config.data.skip_long)?
        .iter()
        .map(|tokens| masked_example(tokens, &tok))
        .collect::<Result<Vec<_>, _>>()?;
    let mut trainer = match &resume {
        Some(ckpt) => {
            let mut trainer = PerformerTrainer::resume(ckpt, examples)?;
            trainer.train.steps = config.train.steps;
            trainer
        }
        None => PerformerTrainer::new(
            config.performer.clone(),
            config.tokenizer.clone(),
            config.train.clone(),
            examples,
            config.seed,
        )?,
    };
    write_atomic(&t.output.join("manifest.tsv"), data.manifest.as_bytes())?;
    let mut log = RunLog::open(&t.output, resume.is_some())?;
    trainer.run(&mut log)?;
    log.finish()?;
    write_atomic(&t.output.join("performer.ckpt"), &trainer.checkpoint().to_bytes())?;
    echo(&t.output.join("config.toml"), &config, args)
}
