//! Vocabulary size and sequence length accounting for tokenizer presets.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::midi::Score;
use crate::pertok::{Tokenizer, TokenizerConfig, TokenizerError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("benchmark corpus is empty")]
    EmptyCorpus,
    #[error("{preset}: {source}")]
    Tokenizer {
        preset: String,
        #[source]
        source: TokenizerError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub config: TokenizerConfig,
}

/// Sixteenth grid with velocity and duration, no microshift.
pub fn quantized(ticks_per_quarter: u16) -> TokenizerConfig {
    let tpq = u32::from(ticks_per_quarter);
    TokenizerConfig {
        grids: vec![(tpq / 4).max(1)],
        use_microshift: false,
        ..TokenizerConfig::with_resolution(ticks_per_quarter)
    }
}

/// Overlapping sixteenth and triplet grids with the widest microshift range
/// the finest grid admits, one bucket per tick.
pub fn fine_microshift(ticks_per_quarter: u16) -> TokenizerConfig {
    let tpq = u32::from(ticks_per_quarter);
    let mut grids = vec![(tpq / 4).max(1)];
    for g in [tpq / 3, 2 * tpq / 3] {
        if g > 0 && tpq % 3 == 0 && !grids.contains(&g) {
            grids.push(g);
        }
    }
    let min_grid = grids.iter().copied().min().unwrap_or(1);
    let max_microshift_ticks = min_grid.saturating_sub(1) / 2;
    TokenizerConfig {
        grids,
        max_microshift_ticks,
        microshift_buckets: 2 * max_microshift_ticks + 1,
        use_microshift: true,
        ..TokenizerConfig::with_resolution(ticks_per_quarter)
    }
}

pub fn no_duration(ticks_per_quarter: u16) -> TokenizerConfig {
    TokenizerConfig {
        use_duration: false,
        ..quantized(ticks_per_quarter)
    }
}

/// The three standard rows: `pertok`, `pertok-p`, `pertok-no-duration`.
pub fn standard_presets(ticks_per_quarter: u16) -> Vec<Preset> {
    [
        ("pertok", quantized(ticks_per_quarter)),
        ("pertok-p", fine_microshift(ticks_per_quarter)),
        ("pertok-no-duration", no_duration(ticks_per_quarter)),
    ]
    .into_iter()
    .map(|(name, config)| Preset {
        name: name.to_string(),
        config,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub name: String,
    pub vocab_size: usize,
    pub mean_length: f64,
    pub mean_notes: f64,
    pub files: usize,
}

/// Encodes every score (rescaled to each preset's resolution) and averages.
pub fn run_bench(corpus: &[Score], presets: &[Preset]) -> Result<Vec<BenchRow>, BenchError> {
    if corpus.is_empty() {
        return Err(BenchError::EmptyCorpus);
    }
    presets
        .iter()
        .map(|p| {
            let err = |source| BenchError::Tokenizer {
                preset: p.name.clone(),
                source,
            };
            let tok = Tokenizer::new(p.config.clone()).map_err(err)?;
            let (mut tokens, mut notes) = (0usize, 0usize);
            for score in corpus {
                let score = score.rescaled(p.config.ticks_per_quarter);
                tokens += tok.encode(&score).map_err(err)?.len();
                notes += score.notes.len();
            }
            let n = corpus.len() as f64;
            Ok(BenchRow {
                name: p.name.clone(),
                vocab_size: tok.vocab().len(),
                mean_length: tokens as f64 / n,
                mean_notes: notes as f64 / n,
                files: corpus.len(),
            })
        })
        .collect()
}

pub fn render_table(rows: &[BenchRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max("tokenizer".len());
    let mut out = format!("{:<width$}  {:>10}  {:>15}\n", "tokenizer", "vocab size", "mean seq length");
    for r in rows {
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>15.2}", r.name, r.vocab_size, r.mean_length);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::NoteEvent;

    #[test]
    fn rows_follow_preset_order() {
        let score = Score::new(480, vec![NoteEvent::new(60, 0, 120, 90), NoteEvent::new(64, 245, 240, 70)]);
        let rows = run_bench(&[score], &standard_presets(480)).unwrap();
        let names: Vec<_> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["pertok", "pertok-p", "pertok-no-duration"]);
        assert_eq!(rows[2].mean_length, rows[0].mean_length - 2.0);
        assert!(rows[0].mean_length < rows[1].mean_length);
        assert!(render_table(&rows).lines().count() == 4);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(run_bench(&[], &standard_presets(480)), Err(BenchError::EmptyCorpus)));
    }

    #[test]
    fn presets_validate_across_resolutions() {
        for tpq in [96, 220, 440, 480, 960] {
            for p in standard_presets(tpq) {
                p.config.validate().unwrap();
            }
        }
    }
}
