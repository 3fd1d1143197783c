//! Corpus ingestion, segmentation, splits and synthetic style corpora.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::midi::{parse_midi, MidiError, NoteEvent, Score};
use crate::numerics::rng::{stream, STREAM_CORPUS, STREAM_SHUFFLE};

pub const SIXTEENTHS_PER_BAR: u32 = 16;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Midi {
        path: PathBuf,
        #[source]
        source: MidiError,
    },
    #[error("invalid style: {0}")]
    InvalidStyle(String),
    #[error("split ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("segment length must be at least one bar")]
    ZeroBars,
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

/// Expressive profile of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleSpec {
    pub ticks_per_quarter: u16,
    pub bars: u32,
    pub velocity_mean: f64,
    pub velocity_std: f64,
    /// Ticks; positive plays late.
    pub microshift_mean: f64,
    pub microshift_std: f64,
    pub max_microshift_ticks: u32,
    /// Notes per bar, each on a distinct sixteenth.
    pub density: f64,
    pub pitches: Vec<u8>,
    pub seed: u64,
}

impl Default for StyleSpec {
    fn default() -> Self {
        Self {
            ticks_per_quarter: 480,
            bars: 4,
            velocity_mean: 80.0,
            velocity_std: 10.0,
            microshift_mean: 0.0,
            microshift_std: 0.0,
            max_microshift_ticks: 30,
            density: 4.0,
            pitches: vec![60, 62, 64, 65, 67, 69, 71, 72],
            seed: 0,
        }
    }
}

impl StyleSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidStyle(m));
        let tpq = u32::from(self.ticks_per_quarter);
        if tpq == 0 || tpq % 4 != 0 {
            return bad("ticks_per_quarter must be a positive multiple of 4".into());
        }
        if self.bars == 0 {
            return bad("bars must be positive".into());
        }
        if 2 * self.max_microshift_ticks >= tpq / 4 {
            return bad("max_microshift_ticks must stay below half a sixteenth".into());
        }
        if self.microshift_std < 0.0 || self.velocity_std < 0.0 {
            return bad("standard deviations must be non-negative".into());
        }
        if self.microshift_mean.abs() + 2.0 * self.microshift_std > f64::from(self.max_microshift_ticks) {
            return bad(format!(
                "|microshift_mean| + 2 microshift_std = {} exceeds max_microshift_ticks {}",
                self.microshift_mean.abs() + 2.0 * self.microshift_std,
                self.max_microshift_ticks
            ));
        }
        // two-sided 99% normal interval
        let (lo, hi) = (
            self.velocity_mean - 2.576 * self.velocity_std,
            self.velocity_mean + 2.576 * self.velocity_std,
        );
        if lo < 0.5 || hi > 127.5 {
            return bad(format!("velocity 99% range [{lo:.1}, {hi:.1}] leaves [1, 127]"));
        }
        if !(self.density > 0.0 && self.density <= f64::from(SIXTEENTHS_PER_BAR)) {
            return bad("density must lie in (0, 16] notes per bar".into());
        }
        if self.pitches.is_empty() || self.pitches.iter().any(|&p| p > 127) {
            return bad("pitch set must be non-empty MIDI pitches".into());
        }
        Ok(())
    }

    pub fn notes_per_score(&self) -> usize {
        let n = (self.density * f64::from(self.bars)).round() as usize;
        n.clamp(1, (SIXTEENTHS_PER_BAR * self.bars) as usize)
    }
}

/// `n` seeded scores of the given style; score `i` depends only on `(seed, i)`.
pub fn synth_corpus(spec: &StyleSpec, n: usize) -> Result<Vec<Score>, CorpusError> {
    spec.validate()?;
    let tpq = u32::from(spec.ticks_per_quarter);
    let sixteenth = tpq / 4;
    let slots = (SIXTEENTHS_PER_BAR * spec.bars) as usize;
    let length = slots as u32 * sixteenth;
    let max_shift = i64::from(spec.max_microshift_ticks);
    let shift_dist = Normal::new(spec.microshift_mean, spec.microshift_std)
        .map_err(|e| CorpusError::InvalidStyle(e.to_string()))?;
    let velocity_dist = Normal::new(spec.velocity_mean, spec.velocity_std)
        .map_err(|e| CorpusError::InvalidStyle(e.to_string()))?;
    let per_score = spec.notes_per_score();
    let mut corpus = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(spec.seed, &[STREAM_CORPUS, i as u64]);
        let mut chosen = index::sample(&mut rng, slots, per_score).into_vec();
        chosen.sort_unstable();
        let notes = chosen
            .into_iter()
            .map(|slot| {
                let grid = slot as u32 * sixteenth;
                let pitch = spec.pitches[rng.random_range(0..spec.pitches.len())];
                let sixteenths = rng.random_range(1..=4u32);
                let shift = (shift_dist.sample(&mut rng).round() as i64).clamp(-max_shift, max_shift);
                let onset = (i64::from(grid) + shift).max(0) as u32;
                let velocity = velocity_dist.sample(&mut rng).round().clamp(1.0, 127.0) as u8;
                let duration = (sixteenths * sixteenth).min(length - onset).max(1);
                NoteEvent::new(pitch, onset, duration, velocity)
            })
            .collect();
        corpus.push(Score::new(spec.ticks_per_quarter, notes).with_length(length));
    }
    Ok(corpus)
}

/// Cuts a score into consecutive windows of `bars` bars.
///
/// Notes keep their onset relative to the window and are cut at its end;
/// windows without notes and a trailing window shorter than a bar are dropped.
pub fn segment(score: &Score, bars: u32) -> Result<Vec<Score>, CorpusError> {
    if bars == 0 {
        return Err(CorpusError::ZeroBars);
    }
    let bar = score.bar_ticks().max(1);
    let window = bar.saturating_mul(bars);
    let mut out = Vec::new();
    let mut start = 0u32;
    while start < score.length_ticks {
        let len = window.min(score.length_ticks - start);
        if len < bar && start > 0 {
            break;
        }
        let end = start + len;
        let notes: Vec<NoteEvent> = score
            .notes
            .iter()
            .filter(|n| n.onset_ticks >= start && n.onset_ticks < end)
            .map(|n| {
                NoteEvent::new(
                    n.pitch,
                    n.onset_ticks - start,
                    n.end_ticks().min(end) - n.onset_ticks,
                    n.velocity,
                )
            })
            .collect();
        if !notes.is_empty() {
            let mut seg = Score::new(score.ticks_per_quarter, notes).with_length(len);
            seg.time_signature = score.time_signature;
            out.push(seg);
        }
        start = end;
    }
    Ok(out)
}

/// Seeded shuffle, then the first `round(ratio * n)` items go to training.
pub fn split<T>(corpus: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[STREAM_SHUFFLE, u64::MAX]));
    let n_train = (ratio * n as f64).round() as usize;
    let mut in_train = vec![false; n];
    order[..n_train].iter().for_each(|&i| in_train[i] = true);
    let mut slots: Vec<Option<T>> = corpus.into_iter().map(Some).collect();
    let take = |idx: &[usize], slots: &mut Vec<Option<T>>| -> Vec<T> {
        idx.iter().map(|&i| slots[i].take().expect("each index once")).collect()
    };
    let train = take(&order[..n_train], &mut slots);
    let test = take(&order[n_train..], &mut slots);
    Ok((train, test))
}

/// `.mid` / `.midi` files under `dir`, sorted by path.
pub fn scan_midi_dir(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf()),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("directory walk failed")),
        })?;
        let is_midi = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
        if entry.file_type().is_file() && is_midi {
            files.push(entry.into_path());
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_midi(path: &Path) -> Result<Score, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_midi(&bytes).map_err(|source| CorpusError::Midi {
        path: path.to_path_buf(),
        source,
    })
}

/// Every MIDI file under `dir`, in path order.
pub fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, Score)>, CorpusError> {
    scan_midi_dir(dir)?
        .into_iter()
        .map(|p| load_midi(&p).map(|s| (p, s)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One `path<TAB>split` line per entry.
pub fn write_manifest(entries: &[(PathBuf, Split)]) -> String {
    entries
        .iter()
        .map(|(p, s)| format!("{}\t{s}\n", p.display()))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<(PathBuf, Split)>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (path, split) = l.rsplit_once('\t').ok_or_else(|| CorpusError::Manifest {
                line: i + 1,
                reason: "expected `path<TAB>split`".into(),
            })?;
            let split = split
                .trim()
                .parse()
                .map_err(|reason| CorpusError::Manifest { line: i + 1, reason })?;
            Ok((PathBuf::from(path), split))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bars_score(bars: u32, every: u32) -> Score {
        let tpq = 480;
        let len = bars * 4 * tpq;
        let notes = (0..len / every).map(|i| NoteEvent::new(60, i * every, every, 80)).collect();
        Score::new(tpq as u16, notes).with_length(len)
    }

    #[test]
    fn eight_bars_make_two_segments() {
        let segs = segment(&bars_score(8, 480), 4).unwrap();
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|s| s.length_ticks == 4 * 1920 && s.notes.len() == 16));
    }

    #[test]
    fn short_tail_policy() {
        assert_eq!(segment(&bars_score(3, 480), 4).unwrap().len(), 1);
        let mut s = bars_score(4, 480);
        s.length_ticks += 100;
        s.notes.push(NoteEvent::new(70, 4 * 1920, 50, 80));
        assert_eq!(segment(&s, 4).unwrap().len(), 1);
    }

    #[test]
    fn straddling_note_is_cut() {
        let s = Score::new(480, vec![NoteEvent::new(60, 1900, 100, 80)]).with_length(2 * 1920);
        let segs = segment(&s, 1).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].notes[0].duration_ticks, 20);
    }

    #[test]
    fn degenerate_style_is_constant() {
        let spec = StyleSpec {
            velocity_std: 0.0,
            microshift_mean: 5.0,
            microshift_std: 0.0,
            ..StyleSpec::default()
        };
        let corpus = synth_corpus(&spec, 5).unwrap();
        for s in &corpus {
            assert_eq!(s.notes.len(), 16);
            for n in &s.notes {
                assert_eq!(n.velocity, 80);
                assert_eq!(n.onset_ticks % 120, 5);
            }
        }
        assert_eq!(corpus, synth_corpus(&spec, 5).unwrap());
    }

    #[test]
    fn style_bounds_enforced() {
        let spec = StyleSpec {
            microshift_mean: 20.0,
            microshift_std: 6.0,
            ..StyleSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_edges() {
        let (train, test) = split((0..10).collect::<Vec<_>>(), 1.0, 3).unwrap();
        assert_eq!((train.len(), test.len()), (10, 0));
        let (a, b) = split((0..10).collect::<Vec<_>>(), 0.7, 3).unwrap();
        assert_eq!(a.len() + b.len(), 10);
        assert_eq!((a.clone(), b.clone()), split((0..10).collect::<Vec<_>>(), 0.7, 3).unwrap());
        assert!(split(vec![1], 1.5, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![(PathBuf::from("a/b.mid"), Split::Train), (PathBuf::from("c.midi"), Split::Test)];
        assert_eq!(parse_manifest(&write_manifest(&entries)).unwrap(), entries);
        assert!(parse_manifest("x.mid\tvalid").is_err());
    }
}
