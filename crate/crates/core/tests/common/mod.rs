//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use std::collections::{BTreeMap, HashSet};

use cadenza_core::midi::{NoteEvent, Score};
use cadenza_core::pertok::Tokenizer;
use rand::Rng;

/// Every `k * g` up to `limit` for every grid, nearest to `onset`; ties go to
/// the finer grid, then the earlier tick.
pub fn quantize_oracle(onset: u32, grids: &[u32], limit: u32) -> (u32, i64) {
    let mut best: Option<(u32, u32, u32)> = None;
    for &g in grids {
        let mut t = 0;
        while t <= limit {
            let key = (t.abs_diff(onset), g, t);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
            t += g;
        }
    }
    let (_, _, t) = best.expect("at least one grid point");
    (t, i64::from(onset) - i64::from(t))
}

pub fn shift_set(grids: &[u32], max: u32) -> Vec<u32> {
    let mut set = std::collections::BTreeSet::new();
    for &g in grids {
        for k in 1.. {
            if k * g > max {
                break;
            }
            set.insert(k * g);
        }
    }
    set.into_iter().collect()
}

/// Whether `delta` is a sum of shift values (unbounded knapsack).
pub fn spellable(delta: u32, grids: &[u32], max: u32) -> bool {
    let values = shift_set(grids, max);
    let mut reach = vec![false; delta as usize + 1];
    reach[0] = true;
    for t in 1..=delta as usize {
        reach[t] = values.iter().any(|&v| v as usize <= t && reach[t - v as usize]);
    }
    reach[delta as usize]
}

/// Nearest duration value, shorter on ties.
pub fn nearest_duration(duration: u32, grids: &[u32], max: u32) -> u32 {
    shift_set(grids, max)
        .into_iter()
        .min_by_key(|&v| (v.abs_diff(duration), v))
        .expect("non-empty duration set")
}

/// A random score whose onsets all lie within `max_shift` of a grid point,
/// with at most one note per (pitch, quantized onset), and whose gaps
/// between consecutive quantized onsets are all spellable as time shifts.
pub fn representable_score<R: Rng>(
    rng: &mut R,
    tpq: u16,
    grids: &[u32],
    max_shift: u32,
    bars: u32,
    max_notes: usize,
) -> Score {
    let length = bars * 4 * u32::from(tpq);
    let max_grid = grids.iter().copied().max().unwrap_or(1);
    let max_timeshift = 4 * u32::from(tpq);
    let n = rng.random_range(0..=max_notes);
    let mut seen = HashSet::new();
    let mut notes = Vec::new();
    for _ in 0..n {
        let g = grids[rng.random_range(0..grids.len())];
        let grid = g * rng.random_range(0..length / g);
        let shift = rng.random_range(-(max_shift as i64)..=max_shift as i64);
        let onset = (i64::from(grid) + shift).max(0) as u32;
        let pitch = rng.random_range(21..=108u8);
        let (q, _) = quantize_oracle(onset, grids, length + 2 * g);
        if !seen.insert((pitch, q)) {
            continue;
        }
        let duration = rng.random_range(1..=(length - onset).clamp(1, 4 * u32::from(tpq)));
        notes.push(NoteEvent::new(pitch, onset, duration, rng.random_range(1..=127)));
    }
    let quantized = |n: &NoteEvent| quantize_oracle(n.onset_ticks, grids, length + 2 * max_grid).0;
    notes.sort_by_key(|n| quantized(n));
    let mut last = 0;
    notes.retain(|n| {
        let q = quantized(n);
        let keep = q == last || spellable(q - last, grids, max_timeshift);
        if keep {
            last = q;
        }
        keep
    });
    Score::new(tpq, notes).with_length(length)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RoundTripError {
    pub onset: u32,
    pub velocity: u32,
    pub duration_mismatches: usize,
}

/// Largest decoded deviations of `tok.decode(tok.encode(score))`, pairing
/// notes per pitch in onset order.
pub fn round_trip_error(tok: &Tokenizer, score: &Score) -> Result<RoundTripError, String> {
    let cfg = tok.config();
    let decoded = tok
        .decode(&tok.encode(score).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    if decoded.notes.len() != score.notes.len() {
        return Err(format!("{} notes in, {} out", score.notes.len(), decoded.notes.len()));
    }
    let group = |s: &Score| {
        let mut m: BTreeMap<u8, Vec<NoteEvent>> = BTreeMap::new();
        for n in &s.notes {
            m.entry(n.pitch).or_default().push(*n);
        }
        for v in m.values_mut() {
            v.sort_by_key(|n| n.onset_ticks);
        }
        m
    };
    let (a, b) = (group(score), group(&decoded));
    let mut err = RoundTripError::default();
    for (pitch, orig) in &a {
        let dec = b.get(pitch).ok_or_else(|| format!("pitch {pitch} lost"))?;
        if dec.len() != orig.len() {
            return Err(format!("pitch {pitch}: {} notes in, {} out", orig.len(), dec.len()));
        }
        for (o, d) in orig.iter().zip(dec) {
            err.onset = err.onset.max(o.onset_ticks.abs_diff(d.onset_ticks));
            if cfg.use_velocity {
                err.velocity = err.velocity.max(u32::from(o.velocity.abs_diff(d.velocity)));
            }
            let expected = if cfg.use_duration {
                nearest_duration(o.duration_ticks, &cfg.grids, cfg.max_timeshift_ticks)
            } else {
                cfg.min_grid()
            };
            if d.duration_ticks != expected {
                err.duration_mismatches += 1;
            }
        }
    }
    Ok(err)
}
