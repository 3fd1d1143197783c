//! Objective evaluation of generated material.
//!
//! Similarity compares count vectors of pitch, onset slot and duration with a
//! cosine measure, plus an exact note-matching rate. Expression fidelity
//! compares velocity and microtiming histograms.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::Score;

pub const PITCH_BINS: usize = 128;
/// Sixteenth-note slots in four bars of 4/4.
pub const SLOT_BINS: usize = 64;
pub const VELOCITY_BINS: usize = 128;
/// One-percent bins over [-50%, +50%) of a sixteenth.
pub const MICROTIMING_BINS: usize = 100;
pub const SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("similarity is undefined for an all-zero vector")]
    ZeroVector,
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("histogram has no mass")]
    EmptyHistogram,
    #[error("nothing to compare")]
    NothingToCompare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Pitch,
    Onset,
    Duration,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 3] = [AttributeKind::Pitch, AttributeKind::Onset, AttributeKind::Duration];

    pub fn bins(self) -> usize {
        match self {
            AttributeKind::Pitch => PITCH_BINS,
            AttributeKind::Onset | AttributeKind::Duration => SLOT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub kind: AttributeKind,
    pub values: Vec<u64>,
}

impl AttributeVector {
    pub fn zeros(kind: AttributeKind) -> Self {
        Self {
            kind,
            values: vec![0; kind.bins()],
        }
    }

    pub fn add(&mut self, other: &AttributeVector) {
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
    }
}

/// Nearest sixteenth index of a tick position, halves rounding up.
pub fn sixteenth_index(ticks: u32, ticks_per_quarter: u16) -> u64 {
    let tpq = u64::from(ticks_per_quarter);
    (8 * u64::from(ticks) + tpq) / (2 * tpq)
}

pub fn onset_slot(onset_ticks: u32, ticks_per_quarter: u16) -> usize {
    (sixteenth_index(onset_ticks, ticks_per_quarter) % SLOT_BINS as u64) as usize
}

pub fn duration_bin(duration_ticks: u32, ticks_per_quarter: u16) -> usize {
    sixteenth_index(duration_ticks, ticks_per_quarter).min(SLOT_BINS as u64 - 1) as usize
}

pub fn attribute_vector(score: &Score, kind: AttributeKind) -> AttributeVector {
    let mut v = AttributeVector::zeros(kind);
    let tpq = score.ticks_per_quarter;
    for n in &score.notes {
        let bin = match kind {
            AttributeKind::Pitch => usize::from(n.pitch),
            AttributeKind::Onset => onset_slot(n.onset_ticks, tpq),
            AttributeKind::Duration => duration_bin(n.duration_ticks, tpq),
        };
        v.values[bin] += 1;
    }
    v
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Cosine similarity in percent.
///
/// Each vector is first divided by the gcd of its entries, so integer
/// rescaling leaves the result bit-identical.
pub fn cosine_similarity(a: &AttributeVector, b: &AttributeVector) -> Result<f64, MetricsError> {
    cosine_counts(&a.values, &b.values)
}

pub fn cosine_counts(a: &[u64], b: &[u64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let reduce = |v: &[u64]| -> Result<Vec<u128>, MetricsError> {
        let g = v.iter().fold(0, |acc, &x| gcd(acc, x));
        if g == 0 {
            return Err(MetricsError::ZeroVector);
        }
        Ok(v.iter().map(|&x| u128::from(x / g)).collect())
    };
    let (a, b) = (reduce(a)?, reduce(b)?);
    let dot: u128 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: u128 = a.iter().map(|x| x * x).sum();
    let nb: u128 = b.iter().map(|x| x * x).sum();
    if dot == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * dot as f64 / (na as f64 * nb as f64).sqrt())
}

/// Percentage of generated notes with an exact (pitch, onset slot, duration
/// bin) partner in the source, each source note used at most once.
pub fn absolute_similarity(generated: &Score, source: &Score) -> f64 {
    if generated.notes.is_empty() {
        return if source.notes.is_empty() { 100.0 } else { 0.0 };
    }
    let key = |s: &Score, n: &crate::midi::NoteEvent| {
        (
            n.pitch,
            onset_slot(n.onset_ticks, s.ticks_per_quarter),
            duration_bin(n.duration_ticks, s.ticks_per_quarter),
        )
    };
    let mut available: HashMap<_, usize> = HashMap::new();
    for n in &source.notes {
        *available.entry(key(source, n)).or_default() += 1;
    }
    let mut matched = 0usize;
    for n in &generated.notes {
        if let Some(c) = available.get_mut(&key(generated, n)).filter(|c| **c > 0) {
            *c -= 1;
            matched += 1;
        }
    }
    100.0 * matched as f64 / generated.notes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionHistogram {
    pub velocity: Vec<u64>,
    pub microtiming: Vec<u64>,
}

impl ExpressionHistogram {
    pub fn zeros() -> Self {
        Self {
            velocity: vec![0; VELOCITY_BINS],
            microtiming: vec![0; MICROTIMING_BINS],
        }
    }

    pub fn add(&mut self, other: &ExpressionHistogram) {
        self.velocity.iter_mut().zip(&other.velocity).for_each(|(a, b)| *a += b);
        self.microtiming.iter_mut().zip(&other.microtiming).for_each(|(a, b)| *a += b);
    }

    pub fn notes(&self) -> u64 {
        self.velocity.iter().sum()
    }
}

/// Bin of an onset's deviation from its nearest sixteenth, in whole percent
/// of a sixteenth, offset so bin 50 is on the grid.
pub fn microtiming_bin(onset_ticks: u32, ticks_per_quarter: u16) -> usize {
    let tpq = i64::from(ticks_per_quarter);
    let nearest = sixteenth_index(onset_ticks, ticks_per_quarter) as i64;
    let deviation = 4 * i64::from(onset_ticks) - nearest * tpq;
    ((100 * deviation).div_euclid(tpq) + 50).clamp(0, MICROTIMING_BINS as i64 - 1) as usize
}

pub fn expression_histograms(score: &Score) -> ExpressionHistogram {
    let mut h = ExpressionHistogram::zeros();
    for n in &score.notes {
        h.velocity[usize::from(n.velocity.min(127))] += 1;
        h.microtiming[microtiming_bin(n.onset_ticks, score.ticks_per_quarter)] += 1;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub kl: f64,
    pub mean_delta: f64,
    pub std_delta: f64,
}

fn smoothed(counts: &[u64]) -> Result<Vec<f64>, MetricsError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::EmptyHistogram);
    }
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64 + SMOOTHING).collect();
    let z: f64 = p.iter().sum();
    Ok(p.into_iter().map(|x| x / z).collect())
}

fn moments(p: &[f64]) -> (f64, f64) {
    let mean: f64 = p.iter().enumerate().map(|(i, &w)| i as f64 * w).sum();
    let var: f64 = p.iter().enumerate().map(|(i, &w)| w * (i as f64 - mean).powi(2)).sum();
    (mean, var.sqrt())
}

/// `KL(p || q)` of smoothed histograms with the gaps in mean and spread.
/// `p` is the model output and `q` the reference data.
pub fn histogram_divergence(p: &[u64], q: &[u64]) -> Result<Divergence, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::LengthMismatch(p.len(), q.len()));
    }
    let (ps, qs) = (smoothed(p)?, smoothed(q)?);
    let kl = ps.iter().zip(&qs).map(|(&a, &b)| a * (a / b).ln()).sum();
    let (pm, psd) = moments(&ps);
    let (qm, qsd) = moments(&qs);
    Ok(Divergence {
        kl,
        mean_delta: (pm - qm).abs(),
        std_delta: (psd - qsd).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub pitch: Option<f64>,
    pub onset: Option<f64>,
    pub duration: Option<f64>,
    pub absolute: Option<f64>,
}

impl SimilarityRow {
    fn set(&mut self, kind: AttributeKind, value: Option<f64>) {
        match kind {
            AttributeKind::Pitch => self.pitch = value,
            AttributeKind::Onset => self.onset = value,
            AttributeKind::Duration => self.duration = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSimilarity {
    pub name: String,
    #[serde(flatten)]
    pub row: SimilarityRow,
}

/// Per-file rows, their mean, and the same measures on corpus-pooled counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub files: Vec<FileSimilarity>,
    pub per_file_mean: SimilarityRow,
    pub pooled: SimilarityRow,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Compares each `(name, generated, reference)` pair. A pair whose vectors
/// are all-zero gets no value for that measure and is left out of the mean.
pub fn similarity_report(pairs: &[(String, Score, Score)]) -> Result<SimilarityReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NothingToCompare);
    }
    let mut files = Vec::with_capacity(pairs.len());
    let mut pooled_gen: Vec<AttributeVector> = AttributeKind::ALL.iter().map(|&k| AttributeVector::zeros(k)).collect();
    let mut pooled_ref = pooled_gen.clone();
    let (mut matched, mut generated) = (0.0, 0usize);
    for (name, gen, reference) in pairs {
        let mut row = SimilarityRow::default();
        for (i, kind) in AttributeKind::ALL.into_iter().enumerate() {
            let (a, b) = (attribute_vector(gen, kind), attribute_vector(reference, kind));
            row.set(kind, cosine_similarity(&a, &b).ok());
            pooled_gen[i].add(&a);
            pooled_ref[i].add(&b);
        }
        let abs = absolute_similarity(gen, reference);
        row.absolute = Some(abs);
        matched += abs / 100.0 * gen.notes.len() as f64;
        generated += gen.notes.len();
        files.push(FileSimilarity { name: name.clone(), row });
    }
    let per_file_mean = SimilarityRow {
        pitch: mean_defined(files.iter().map(|f| f.row.pitch)),
        onset: mean_defined(files.iter().map(|f| f.row.onset)),
        duration: mean_defined(files.iter().map(|f| f.row.duration)),
        absolute: mean_defined(files.iter().map(|f| f.row.absolute)),
    };
    let mut pooled = SimilarityRow::default();
    for (i, kind) in AttributeKind::ALL.into_iter().enumerate() {
        pooled.set(kind, cosine_similarity(&pooled_gen[i], &pooled_ref[i]).ok());
    }
    pooled.absolute = Some(if generated > 0 {
        100.0 * matched / generated as f64
    } else if pairs.iter().all(|p| p.2.notes.is_empty()) {
        100.0
    } else {
        0.0
    });
    Ok(SimilarityReport {
        files,
        per_file_mean,
        pooled,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

impl SimilarityReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<32} {:>8} {:>8} {:>8} {:>8}", "file", "pitch", "onset", "duration", "absolute");
        let mut line = |name: &str, r: &SimilarityRow| {
            let _ = writeln!(
                out,
                "{:<32} {:>8} {:>8} {:>8} {:>8}",
                name,
                cell(r.pitch),
                cell(r.onset),
                cell(r.duration),
                cell(r.absolute)
            );
        };
        for f in &self.files {
            line(&f.name, &f.row);
        }
        line("mean (per file)", &self.per_file_mean);
        line("pooled", &self.pooled);
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for f in &self.files {
            let mut v = serde_json::to_value(f).expect("serializable");
            v["scope"] = "file".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        for (scope, row) in [("per_file_mean", &self.per_file_mean), ("pooled", &self.pooled)] {
            let mut v = serde_json::to_value(row).expect("serializable");
            v["scope"] = scope.into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

/// Expression statistics of model output against reference data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub notes_generated: u64,
    pub notes_reference: u64,
    pub velocity: Divergence,
    pub microtiming: Divergence,
}

pub fn fidelity_report(generated: &[Score], reference: &[Score]) -> Result<FidelityReport, MetricsError> {
    let pool = |scores: &[Score]| {
        let mut h = ExpressionHistogram::zeros();
        scores.iter().for_each(|s| h.add(&expression_histograms(s)));
        h
    };
    let (g, r) = (pool(generated), pool(reference));
    Ok(FidelityReport {
        notes_generated: g.notes(),
        notes_reference: r.notes(),
        velocity: histogram_divergence(&g.velocity, &r.velocity)?,
        microtiming: histogram_divergence(&g.microtiming, &r.microtiming)?,
    })
}

impl FidelityReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>10} {:>10} {:>10}", "attribute", "KL", "mean d", "std d");
        for (name, d) in [("velocity", &self.velocity), ("microtiming", &self.microtiming)] {
            let _ = writeln!(out, "{:<12} {:>10.4} {:>10.4} {:>10.4}", name, d.kl, d.mean_delta, d.std_delta);
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (name, d) in [("velocity", &self.velocity), ("microtiming", &self.microtiming)] {
            let mut v = serde_json::to_value(d).expect("serializable");
            v["attribute"] = name.into();
            v["notes_generated"] = self.notes_generated.into();
            v["notes_reference"] = self.notes_reference.into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}
