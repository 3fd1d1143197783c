//! Run configuration: a versioned TOML file layered over built-in defaults,
//! then `--set section.key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cadenza_core::corpus::StyleSpec;
use cadenza_core::{ComposerConfig, PerformerConfig, TokenizerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Bars per training excerpt; zero keeps whole files.
    pub segment_bars: u32,
    /// Fraction of excerpts used for training; the rest is listed as test.
    pub train_ratio: f64,
    /// Excerpts longer than the model context are dropped.
    pub skip_long: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub tokenizer: TokenizerConfig,
    pub composer: ComposerConfig,
    pub performer: PerformerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub generate: GenerateConfig,
    pub style: StyleSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            tokenizer: TokenizerConfig::default(),
            composer: ComposerConfig::desk(0),
            performer: PerformerConfig::desk(0),
            train: TrainConfig::default(),
            data: DataConfig {
                segment_bars: 4,
                train_ratio: 1.0,
                skip_long: true,
            },
            generate: GenerateConfig {
                temperature: 1.0,
                top_p: 0.9,
                max_len: 256,
            },
            style: StyleSpec::default(),
        }
    }
}

/// Copies `patch` into `base`, rejecting keys the defaults do not define.
fn merge(base: &mut Table, patch: Table, prefix: &str) -> Result<()> {
    for (key, value) in patch {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (None, _) => bail!("unknown config key `{path}`"),
            (Some(Value::Table(inner)), Value::Table(v)) => merge(inner, v, &path)?,
            (Some(Value::Table(_)), _) => bail!("config key `{path}` must be a table"),
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Parses the right-hand side of `--set`: a TOML value, or a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn nest(path: &str, value: Value) -> Table {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut table = Table::new();
    table.insert(last.to_string(), value);
    for part in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(part.to_string(), Value::Table(table));
        table = outer;
    }
    table
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = Table::try_from(RunConfig::default()).context("serializing defaults")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let patch: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if let Some(v) = patch.get("schema_version") {
                if v.as_integer() != Some(i64::from(SCHEMA_VERSION)) {
                    bail!("{}: unsupported schema_version {v}, expected {SCHEMA_VERSION}", path.display());
                }
            }
            merge(&mut table, patch, "").with_context(|| format!("in {}", path.display()))?;
        }
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .with_context(|| format!("--set expects key=value, got `{set}`"))?;
            merge(&mut table, nest(key.trim(), parse_value(raw.trim())), "")?;
        }
        let mut config: RunConfig = table.try_into().context("invalid config")?;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        config.style.seed = config.seed;
        config.tokenizer.validate()?;
        Ok(config)
    }

    /// Fills in the vocabulary size the tokenizer implies.
    pub fn bind_vocab(&mut self, vocab_size: usize) -> Result<()> {
        for (name, slot) in [
            ("composer", &mut self.composer.vocab_size),
            ("performer", &mut self.performer.vocab_size),
        ] {
            match *slot {
                0 => *slot = vocab_size,
                n if n == vocab_size => {}
                n => bail!("{name}.vocab_size = {n} but the tokenizer defines {vocab_size} tokens"),
            }
        }
        Ok(())
    }

    /// The resolved config as TOML, headed by the command line that produced it.
    pub fn echo(&self, args: &[String]) -> String {
        let body = toml::to_string(self).expect("config serializes");
        format!("# {}\n{body}", args.join(" "))
    }
}
