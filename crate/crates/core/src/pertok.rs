//! PerTok: expressive MIDI tokenization with split macro/micro timing.
//!
//! Note positions are quantized against several overlapping grids at once
//! (for example sixteenths and eighth-note triplets). The distance between
//! consecutive quantized positions is spelled with `TimeShift` tokens and the
//! leftover deviation of each note from its grid point becomes a `MicroShift`
//! token. Composition tokens (`TimeShift`, `Pitch`, `Duration`) and
//! performance tokens (`Velocity`, `MicroShift`) can therefore be separated
//! without re-encoding, which is what lets the composer and performer models
//! train on different data.
//!
//! Every note is written as
//!
//! ```text
//! TimeShift* Pitch Velocity? MicroShift? Duration?
//! ```
//!
//! where the optional tokens are present exactly when the corresponding
//! feature is enabled in [`TokenizerConfig`]. Notes sharing a quantized onset
//! are ordered by ascending pitch and have no `TimeShift` between them.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{NoteEvent, Score};

/// Velocity used when a sequence carries no velocity token for a note.
pub const DEFAULT_VELOCITY: u8 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub ticks_per_quarter: u16,
    /// Grid step sizes in ticks, e.g. `tpq/4` (16ths) and `tpq/3` (8th triplets).
    pub grids: Vec<u32>,
    pub max_microshift_ticks: u32,
    pub microshift_buckets: u32,
    pub velocity_buckets: u32,
    pub use_duration: bool,
    pub use_velocity: bool,
    pub use_microshift: bool,
    pub pitch_min: u8,
    pub pitch_max: u8,
    pub max_timeshift_ticks: u32,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::with_resolution(480)
    }
}

impl TokenizerConfig {
    /// Sixteenth and eighth-triplet grids, 30-tick microshift at 480 TPQ
    /// (scaled with resolution), 32 velocity buckets.
    pub fn with_resolution(ticks_per_quarter: u16) -> Self {
        let tpq = u32::from(ticks_per_quarter);
        let mut grids = vec![tpq / 4];
        if tpq % 3 == 0 {
            grids.push(tpq / 3);
        }
        let max_microshift_ticks = tpq / 16;
        Self {
            ticks_per_quarter,
            grids,
            max_microshift_ticks,
            microshift_buckets: 2 * (max_microshift_ticks / 2) + 1,
            velocity_buckets: 32,
            use_duration: true,
            use_velocity: true,
            use_microshift: true,
            pitch_min: 0,
            pitch_max: 127,
            max_timeshift_ticks: 4 * tpq,
        }
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        let invalid = |msg: String| Err(TokenizerError::InvalidConfig(msg));
        if self.ticks_per_quarter == 0 {
            return invalid("ticks_per_quarter must be positive".into());
        }
        if self.grids.is_empty() {
            return invalid("at least one grid is required".into());
        }
        if self.grids.contains(&0) {
            return invalid("grid steps must be positive".into());
        }
        let mut sorted = self.grids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.grids.len() {
            return invalid("grid steps must be distinct".into());
        }
        let min_grid = sorted[0];
        if 2 * self.max_microshift_ticks >= min_grid {
            return invalid(format!(
                "max_microshift_ticks {} must be below half the finest grid ({min_grid})",
                self.max_microshift_ticks
            ));
        }
        if self.microshift_buckets == 0 || self.microshift_buckets % 2 == 0 {
            return invalid("microshift_buckets must be odd".into());
        }
        if self.microshift_buckets > 2 * self.max_microshift_ticks + 1 {
            return invalid(format!(
                "{} microshift buckets cannot be distinct integer offsets within +/-{}",
                self.microshift_buckets, self.max_microshift_ticks
            ));
        }
        if !(1..=127).contains(&self.velocity_buckets) {
            return invalid("velocity_buckets must lie in 1..=127".into());
        }
        if self.pitch_min > self.pitch_max || self.pitch_max > 127 {
            return invalid("pitch range must satisfy pitch_min <= pitch_max <= 127".into());
        }
        if self.max_timeshift_ticks < min_grid {
            return invalid("max_timeshift_ticks must be at least the finest grid".into());
        }
        Ok(())
    }

    pub fn min_grid(&self) -> u32 {
        self.grids.iter().copied().min().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizerError {
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("score resolution {score} TPQ does not match tokenizer resolution {config} TPQ")]
    ResolutionMismatch { score: u16, config: u16 },
    #[error("note {index} ({note}) has pitch outside {min}..={max}")]
    PitchOutOfRange {
        index: usize,
        note: NoteEvent,
        min: u8,
        max: u8,
    },
    #[error("token {index} ({token}) is not in the vocabulary")]
    UnknownToken { index: usize, token: Token },
    #[error("token id {id} at position {index} is outside the vocabulary of {size}")]
    UnknownId { index: usize, id: u32, size: usize },
    #[error("token {index} ({token}) is out of order: {reason}")]
    OutOfOrder {
        index: usize,
        token: Token,
        reason: &'static str,
    },
    #[error("line {line}: cannot parse token `{text}`")]
    BadTokenText { line: usize, text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Mask,
    Pitch,
    TimeShift,
    Velocity,
    MicroShift,
    Duration,
}

impl TokenKind {
    pub fn is_performance(self) -> bool {
        matches!(self, TokenKind::Velocity | TokenKind::MicroShift)
    }

    pub fn is_special(self) -> bool {
        matches!(
            self,
            TokenKind::Pad | TokenKind::Bos | TokenKind::Eos | TokenKind::Mask
        )
    }

    fn name(self) -> &'static str {
        match self {
            TokenKind::Pad => "PAD",
            TokenKind::Bos => "BOS",
            TokenKind::Eos => "EOS",
            TokenKind::Mask => "MASK",
            TokenKind::Pitch => "Pitch",
            TokenKind::TimeShift => "TimeShift",
            TokenKind::Velocity => "Velocity",
            TokenKind::MicroShift => "MicroShift",
            TokenKind::Duration => "Duration",
        }
    }
}

/// One vocabulary element. Payloads are ticks for the timing kinds, the MIDI
/// pitch for `Pitch` and the bucket-center velocity for `Velocity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Mask,
    Pitch(u8),
    TimeShift(u32),
    Velocity(u8),
    MicroShift(i32),
    Duration(u32),
}

impl Token {
    pub fn kind(&self) -> TokenKind {
        match self {
            Token::Pad => TokenKind::Pad,
            Token::Bos => TokenKind::Bos,
            Token::Eos => TokenKind::Eos,
            Token::Mask => TokenKind::Mask,
            Token::Pitch(_) => TokenKind::Pitch,
            Token::TimeShift(_) => TokenKind::TimeShift,
            Token::Velocity(_) => TokenKind::Velocity,
            Token::MicroShift(_) => TokenKind::MicroShift,
            Token::Duration(_) => TokenKind::Duration,
        }
    }

    pub fn is_performance(&self) -> bool {
        self.kind().is_performance()
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.kind().name();
        match *self {
            Token::Pad | Token::Bos | Token::Eos | Token::Mask => f.write_str(name),
            Token::Pitch(v) | Token::Velocity(v) => write!(f, "{name}_{v}"),
            Token::TimeShift(v) | Token::Duration(v) => write!(f, "{name}_{v}"),
            Token::MicroShift(v) => write!(f, "{name}_{v}"),
        }
    }
}

impl FromStr for Token {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PAD" => return Ok(Token::Pad),
            "BOS" => return Ok(Token::Bos),
            "EOS" => return Ok(Token::Eos),
            "MASK" => return Ok(Token::Mask),
            _ => {}
        }
        let (kind, value) = s.split_once('_').ok_or(())?;
        Ok(match kind {
            "Pitch" => Token::Pitch(value.parse().map_err(|_| ())?),
            "TimeShift" => Token::TimeShift(value.parse().map_err(|_| ())?),
            "Velocity" => Token::Velocity(value.parse().map_err(|_| ())?),
            "MicroShift" => Token::MicroShift(value.parse().map_err(|_| ())?),
            "Duration" => Token::Duration(value.parse().map_err(|_| ())?),
            _ => return Err(()),
        })
    }
}

/// Renders tokens in the line-oriented interchange format.
pub fn tokens_to_text(tokens: &[Token]) -> String {
    let mut out = String::with_capacity(tokens.len() * 12);
    for t in tokens {
        out.push_str(&t.to_string());
        out.push('\n');
    }
    out
}

/// Parses the line-oriented token format; blank lines are ignored.
pub fn tokens_from_text(text: &str) -> Result<Vec<Token>, TokenizerError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.parse().map_err(|_| TokenizerError::BadTokenText {
                line: i + 1,
                text: l.to_string(),
            })
        })
        .collect()
}

/// One velocity bucket: inclusive raw range and the value it decodes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VelocityBucket {
    pub low: u8,
    pub high: u8,
    pub center: u8,
}

/// Uniform buckets over MIDI velocities 1..=127.
pub fn velocity_buckets(count: u32) -> Vec<VelocityBucket> {
    let count = count.clamp(1, 127);
    let edge = |b: u32| 1 + (b * 127) / count;
    (0..count)
        .map(|b| {
            let low = edge(b);
            let high = edge(b + 1) - 1;
            VelocityBucket {
                low: low as u8,
                high: high as u8,
                center: ((low + high) / 2) as u8,
            }
        })
        .collect()
}

/// Evenly spaced integer offsets over `[-max, max]`, symmetric, including 0.
pub fn microshift_values(max_ticks: u32, buckets: u32) -> Vec<i32> {
    if buckets <= 1 || max_ticks == 0 {
        return vec![0];
    }
    let half = (buckets / 2) as i64;
    let max = i64::from(max_ticks);
    (-half..=half)
        .map(|i| {
            // round-half-away-from-zero keeps the set symmetric
            let num = i * max;
            let q = (num.abs() * 2 + half) / (2 * half);
            (q * num.signum()) as i32
        })
        .collect()
}

/// Sorted, deduplicated `{k*g : g in grids, 1 <= k*g <= max}`.
pub fn timeshift_values(grids: &[u32], max_ticks: u32) -> Vec<u32> {
    let mut values: Vec<u32> = grids
        .iter()
        .filter(|&&g| g > 0)
        .flat_map(|&g| (1..=max_ticks / g).map(move |k| k * g))
        .collect();
    values.sort_unstable();
    values.dedup();
    values
}

/// Bijective token/id tables with contiguous id ranges per kind.
///
/// Ids are assigned in the order PAD (0), BOS, EOS, MASK, pitches,
/// time shifts, velocities, microshifts, durations; each kind ascending.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    ids: HashMap<Token, u32>,
    ranges: Vec<(TokenKind, Range<u32>)>,
}

impl Vocabulary {
    fn from_groups(groups: Vec<(TokenKind, Vec<Token>)>) -> Self {
        let mut tokens = Vec::new();
        let mut ranges = Vec::new();
        for (kind, group) in groups {
            let start = tokens.len() as u32;
            tokens.extend(group);
            ranges.push((kind, start..tokens.len() as u32));
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (*t, i as u32))
            .collect();
        Self {
            tokens,
            ids,
            ranges,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &Token) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Id range of a kind; empty when the kind is disabled.
    pub fn range(&self, kind: TokenKind) -> Range<u32> {
        self.ranges
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, r)| r.clone())
            .unwrap_or(0..0)
    }

    pub fn count(&self, kind: TokenKind) -> usize {
        self.range(kind).len()
    }

    pub fn encode_ids(&self, tokens: &[Token]) -> Result<Vec<u32>, TokenizerError> {
        tokens
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.id(t)
                    .ok_or(TokenizerError::UnknownToken { index, token: *t })
            })
            .collect()
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Result<Vec<Token>, TokenizerError> {
        ids.iter()
            .enumerate()
            .map(|(index, &id)| {
                self.token(id).ok_or(TokenizerError::UnknownId {
                    index,
                    id,
                    size: self.len(),
                })
            })
            .collect()
    }

    /// `id<TAB>Kind_value` lines, id-sorted.
    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{i}\t{t}\n"))
            .collect()
    }
}

pub fn build_vocabulary(config: &TokenizerConfig) -> Result<Vocabulary, TokenizerError> {
    config.validate()?;
    let timeshifts = timeshift_values(&config.grids, config.max_timeshift_ticks);
    let mut groups = vec![
        (TokenKind::Pad, vec![Token::Pad]),
        (TokenKind::Bos, vec![Token::Bos]),
        (TokenKind::Eos, vec![Token::Eos]),
        (TokenKind::Mask, vec![Token::Mask]),
        (
            TokenKind::Pitch,
            (config.pitch_min..=config.pitch_max).map(Token::Pitch).collect(),
        ),
        (
            TokenKind::TimeShift,
            timeshifts.iter().map(|&v| Token::TimeShift(v)).collect(),
        ),
    ];
    if config.use_velocity {
        groups.push((
            TokenKind::Velocity,
            velocity_buckets(config.velocity_buckets)
                .iter()
                .map(|b| Token::Velocity(b.center))
                .collect(),
        ));
    }
    if config.use_microshift {
        groups.push((
            TokenKind::MicroShift,
            microshift_values(config.max_microshift_ticks, config.microshift_buckets)
                .into_iter()
                .map(Token::MicroShift)
                .collect(),
        ));
    }
    if config.use_duration {
        groups.push((
            TokenKind::Duration,
            timeshifts.iter().map(|&v| Token::Duration(v)).collect(),
        ));
    }
    Ok(Vocabulary::from_groups(groups))
}

/// Minimal-token spelling of time deltas with a fixed set of shift values.
///
/// Among spellings with the fewest tokens the one with the largest leading
/// token wins, so every spelling is non-increasing. For a single grid this is
/// exactly greedy largest-first decomposition; with several grids it also
/// handles deltas such as `160 + 120` that greedy cannot reach.
#[derive(Debug, Clone)]
struct ShiftSpeller {
    values: Vec<u32>,
    unit: u32,
    cap: u32,
    // per multiple of `unit` up to `cap`: (token count, first token) or None
    table: Vec<Option<(u32, u32)>>,
}

impl ShiftSpeller {
    fn new(values: &[u32]) -> Self {
        let unit = values.iter().copied().fold(0, gcd).max(1);
        let max = values.last().copied().unwrap_or(unit);
        let cap = 2 * max;
        let slots = (cap / unit) as usize;
        let mut table: Vec<Option<(u32, u32)>> = vec![None; slots + 1];
        table[0] = Some((0, 0));
        for amount in 1..=slots {
            let mut best: Option<(u32, u32)> = None;
            for &v in values.iter().rev() {
                let steps = (v / unit) as usize;
                if steps > amount {
                    continue;
                }
                if let Some((count, _)) = table[amount - steps] {
                    if best.is_none_or(|(c, _)| count + 1 < c) {
                        best = Some((count + 1, v));
                    }
                }
            }
            table[amount] = best;
        }
        Self {
            values: values.to_vec(),
            unit,
            cap,
            table,
        }
    }

    /// Spells the largest representable amount not exceeding `delta`.
    /// Returns the tokens and the amount they add up to.
    fn spell(&self, delta: u64) -> (Vec<u32>, u64) {
        let mut out = Vec::new();
        if delta == 0 || self.values.is_empty() {
            return (out, 0);
        }
        let max = u64::from(*self.values.last().unwrap());
        let mut rest = delta;
        while rest > u64::from(self.cap) {
            out.push(max as u32);
            rest -= max;
        }
        let mut slot = (rest / u64::from(self.unit)) as usize;
        while self.table[slot].is_none() {
            slot -= 1;
        }
        let covered = delta - rest + slot as u64 * u64::from(self.unit);
        while slot > 0 {
            let (_, v) = self.table[slot].expect("reachable slot");
            out.push(v);
            slot -= (v / self.unit) as usize;
        }
        (out, covered)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Grid point nearest to `onset` over all grids.
///
/// Equidistant candidates resolve to the finer grid, then the earlier tick.
pub fn quantize_onset(onset_ticks: u32, grids: &[u32]) -> (u32, i64) {
    let onset = u64::from(onset_ticks);
    let mut best: Option<(u64, u32, u64)> = None;
    for &g in grids.iter().filter(|&&g| g > 0) {
        let g64 = u64::from(g);
        let below = onset / g64 * g64;
        for candidate in [below, below + g64] {
            let key = (candidate.abs_diff(onset), g, candidate);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
    }
    let grid_tick = best.map_or(onset, |(_, _, t)| t);
    (grid_tick as u32, onset as i64 - grid_tick as i64)
}

/// Immutable encoder/decoder for one [`TokenizerConfig`].
#[derive(Debug, Clone)]
pub struct Tokenizer {
    config: TokenizerConfig,
    vocab: Vocabulary,
    durations: Vec<u32>,
    microshifts: Vec<i32>,
    velocities: Vec<VelocityBucket>,
    speller: ShiftSpeller,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig) -> Result<Self, TokenizerError> {
        let vocab = build_vocabulary(&config)?;
        let timeshifts = timeshift_values(&config.grids, config.max_timeshift_ticks);
        Ok(Self {
            durations: timeshifts.clone(),
            microshifts: microshift_values(config.max_microshift_ticks, config.microshift_buckets),
            velocities: velocity_buckets(config.velocity_buckets),
            speller: ShiftSpeller::new(&timeshifts),
            vocab,
            config,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn timeshift_values(&self) -> &[u32] {
        &self.speller.values
    }

    pub fn quantize_onset(&self, onset_ticks: u32) -> (u32, i64) {
        quantize_onset(onset_ticks, &self.config.grids)
    }

    pub fn velocity_token(&self, velocity: u8) -> Token {
        let bucket = self
            .velocities
            .iter()
            .find(|b| velocity <= b.high)
            .unwrap_or_else(|| self.velocities.last().expect("at least one bucket"));
        Token::Velocity(bucket.center)
    }

    /// Nearest microshift value after clamping to the configured range;
    /// ties go to the value closer to zero.
    pub fn microshift_token(&self, residual: i64) -> Token {
        let max = i64::from(self.config.max_microshift_ticks);
        let r = residual.clamp(-max, max);
        let best = self
            .microshifts
            .iter()
            .copied()
            .min_by_key(|&v| ((i64::from(v) - r).abs(), i64::from(v).abs()))
            .unwrap_or(0);
        Token::MicroShift(best)
    }

    /// Nearest duration value; ties go to the shorter one.
    pub fn duration_token(&self, duration: u32) -> Token {
        let best = self
            .durations
            .iter()
            .copied()
            .min_by_key(|&v| (v.abs_diff(duration), v))
            .unwrap_or(duration);
        Token::Duration(best)
    }

    pub fn encode(&self, score: &Score) -> Result<Vec<Token>, TokenizerError> {
        if score.ticks_per_quarter != self.config.ticks_per_quarter {
            return Err(TokenizerError::ResolutionMismatch {
                score: score.ticks_per_quarter,
                config: self.config.ticks_per_quarter,
            });
        }
        let cfg = &self.config;
        let mut placed = Vec::with_capacity(score.notes.len());
        for (index, note) in score.notes.iter().enumerate() {
            if note.pitch < cfg.pitch_min || note.pitch > cfg.pitch_max {
                return Err(TokenizerError::PitchOutOfRange {
                    index,
                    note: *note,
                    min: cfg.pitch_min,
                    max: cfg.pitch_max,
                });
            }
            let (grid_tick, _) = self.quantize_onset(note.onset_ticks);
            placed.push((grid_tick, *note));
        }
        placed.sort_by_key(|(q, n)| (*q, n.pitch, n.onset_ticks, n.velocity, n.duration_ticks));

        let mut tokens = Vec::with_capacity(2 + placed.len() * 5);
        tokens.push(Token::Bos);
        let mut cursor: u64 = 0;
        for (grid_tick, note) in placed {
            let delta = u64::from(grid_tick).saturating_sub(cursor);
            if delta > 0 {
                let (shifts, covered) = self.speller.spell(delta);
                tokens.extend(shifts.into_iter().map(Token::TimeShift));
                cursor += covered;
            }
            tokens.push(Token::Pitch(note.pitch));
            if cfg.use_velocity {
                tokens.push(self.velocity_token(note.velocity));
            }
            if cfg.use_microshift {
                tokens.push(self.microshift_token(i64::from(note.onset_ticks) - cursor as i64));
            }
            if cfg.use_duration {
                tokens.push(self.duration_token(note.duration_ticks));
            }
        }
        tokens.push(Token::Eos);
        Ok(tokens)
    }

    pub fn encode_ids(&self, score: &Score) -> Result<Vec<u32>, TokenizerError> {
        self.vocab.encode_ids(&self.encode(score)?)
    }

    /// Rebuilds a score from a token sequence in canonical per-note order.
    ///
    /// Performance and duration tokens may be absent (score-only sequences);
    /// missing values fall back to [`DEFAULT_VELOCITY`], zero microshift and
    /// the finest grid step.
    pub fn decode(&self, tokens: &[Token]) -> Result<Score, TokenizerError> {
        #[derive(Clone, Copy)]
        struct Pending {
            pitch: u8,
            // 0 = after pitch, 1 = after velocity, 2 = after microshift, 3 = after duration
            stage: u8,
            velocity: u8,
            shift: i64,
            duration: u32,
        }

        let default_duration = self.config.min_grid();
        let mut notes = Vec::new();
        let mut cursor: i64 = 0;
        let mut pending: Option<Pending> = None;
        let mut ended = false;

        let flush = |p: Option<Pending>, cursor: i64, notes: &mut Vec<NoteEvent>| {
            if let Some(p) = p {
                let onset = (cursor + p.shift).clamp(0, i64::from(u32::MAX)) as u32;
                notes.push(NoteEvent::new(p.pitch, onset, p.duration, p.velocity));
            }
        };

        for (index, &token) in tokens.iter().enumerate() {
            let out_of_order = |reason| TokenizerError::OutOfOrder {
                index,
                token,
                reason,
            };
            if self.vocab.id(&token).is_none() {
                return Err(TokenizerError::UnknownToken { index, token });
            }
            if ended {
                if token == Token::Pad {
                    continue;
                }
                return Err(out_of_order("token after EOS"));
            }
            match token {
                Token::Bos if index == 0 => {}
                Token::Bos => return Err(out_of_order("BOS must be the first token")),
                Token::Eos => {
                    flush(pending.take(), cursor, &mut notes);
                    ended = true;
                }
                Token::Pad => return Err(out_of_order("PAD before EOS")),
                Token::Mask => return Err(out_of_order("unfilled MASK")),
                Token::TimeShift(v) => {
                    flush(pending.take(), cursor, &mut notes);
                    cursor += i64::from(v);
                }
                Token::Pitch(p) => {
                    flush(pending.take(), cursor, &mut notes);
                    pending = Some(Pending {
                        pitch: p,
                        stage: 0,
                        velocity: DEFAULT_VELOCITY,
                        shift: 0,
                        duration: default_duration,
                    });
                }
                Token::Velocity(v) => match pending.as_mut() {
                    Some(p) if p.stage < 1 => {
                        p.velocity = v;
                        p.stage = 1;
                    }
                    Some(_) => return Err(out_of_order("velocity repeated or after microshift")),
                    None => return Err(out_of_order("velocity before any pitch")),
                },
                Token::MicroShift(v) => match pending.as_mut() {
                    Some(p) if p.stage < 2 => {
                        p.shift = i64::from(v);
                        p.stage = 2;
                    }
                    Some(_) => return Err(out_of_order("microshift repeated or after duration")),
                    None => return Err(out_of_order("microshift before any pitch")),
                },
                Token::Duration(v) => match pending.as_mut() {
                    Some(p) if p.stage < 3 => {
                        p.duration = v;
                        p.stage = 3;
                    }
                    Some(_) => return Err(out_of_order("duration repeated")),
                    None => return Err(out_of_order("duration before any pitch")),
                },
            }
        }
        flush(pending.take(), cursor, &mut notes);
        let mut score = Score::new(self.config.ticks_per_quarter, notes);
        score.length_ticks = score.length_ticks.max(cursor.max(0) as u32);
        Ok(score)
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Result<Score, TokenizerError> {
        self.decode(&self.vocab.decode_ids(ids)?)
    }
}

/// Drops velocity and microshift tokens, leaving the composition.
pub fn strip_performance(tokens: &[Token]) -> Vec<Token> {
    tokens
        .iter()
        .copied()
        .filter(|t| !t.is_performance())
        .collect()
}

/// A masked slot: its position and the token it hid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedSlot {
    pub position: usize,
    pub original: Token,
}

/// Replaces every performance token with `MASK` in place.
pub fn mask_performance(tokens: &[Token]) -> (Vec<Token>, Vec<MaskedSlot>) {
    let mut slots = Vec::new();
    let masked = tokens
        .iter()
        .enumerate()
        .map(|(position, &t)| {
            if t.is_performance() {
                slots.push(MaskedSlot {
                    position,
                    original: t,
                });
                Token::Mask
            } else {
                t
            }
        })
        .collect();
    (masked, slots)
}

/// Incremental validator for score-only sequences (no performance tokens).
///
/// Used to constrain autoregressive decoding: it accepts exactly the token
/// kinds that keep the prefix canonical. Time shifts within one gap must be
/// non-increasing and pitches sharing an onset must ascend.
#[derive(Debug, Clone)]
pub struct ScoreGrammar {
    use_duration: bool,
    state: GrammarState,
    last_shift: Option<u32>,
    last_pitch_at_onset: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GrammarState {
    Start,
    Between,
    AfterShift,
    AfterPitch,
    Done,
}

impl ScoreGrammar {
    pub fn new(config: &TokenizerConfig) -> Self {
        Self {
            use_duration: config.use_duration,
            state: GrammarState::Start,
            last_shift: None,
            last_pitch_at_onset: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.state == GrammarState::Done
    }

    /// True when stopping here leaves no half-written note.
    pub fn at_note_boundary(&self) -> bool {
        matches!(self.state, GrammarState::Between | GrammarState::Start)
            || (self.state == GrammarState::AfterPitch && !self.use_duration)
    }

    pub fn allows(&self, token: &Token) -> bool {
        use GrammarState::*;
        match (self.state, token) {
            (Start, Token::Bos) => true,
            (Start, _) | (Done, _) => false,
            (_, Token::Pad | Token::Mask | Token::Bos) => false,
            (_, Token::Velocity(_) | Token::MicroShift(_)) => false,
            (AfterPitch, Token::Duration(_)) => self.use_duration,
            (_, Token::Duration(_)) => false,
            (AfterPitch, _) if self.use_duration => false,
            (AfterShift, Token::Eos) => false,
            (_, Token::Eos) => true,
            (AfterShift, Token::TimeShift(v)) => self.last_shift.is_none_or(|l| *v <= l),
            (_, Token::TimeShift(_)) => true,
            (_, Token::Pitch(p)) => self.last_pitch_at_onset.is_none_or(|l| *p > l),
        }
    }

    pub fn advance(&mut self, token: &Token) {
        use GrammarState::*;
        match token {
            Token::Bos => self.state = Between,
            Token::Eos => self.state = Done,
            Token::TimeShift(v) => {
                self.state = AfterShift;
                self.last_shift = Some(*v);
                self.last_pitch_at_onset = None;
            }
            Token::Pitch(p) => {
                self.state = AfterPitch;
                self.last_shift = None;
                self.last_pitch_at_onset = Some(*p);
            }
            Token::Duration(_) => self.state = Between,
            _ => {}
        }
    }
}

/// Cuts a score-only prefix back to its last complete note and closes it.
pub fn close_score_sequence(tokens: &[Token], config: &TokenizerConfig) -> Vec<Token> {
    let mut grammar = ScoreGrammar::new(config);
    let mut keep = 0;
    for (i, t) in tokens.iter().enumerate() {
        if !grammar.allows(t) {
            break;
        }
        grammar.advance(t);
        if grammar.is_done() {
            return tokens[..=i].to_vec();
        }
        if grammar.at_note_boundary() {
            keep = i + 1;
        }
    }
    let mut out = tokens[..keep].to_vec();
    if out.first() != Some(&Token::Bos) {
        out.insert(0, Token::Bos);
    }
    out.push(Token::Eos);
    out
}
