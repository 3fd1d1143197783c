//! Token selection from logits.

use rand::Rng;

use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Nucleus sampling; a temperature at or below 1e-6 falls back to argmax.
    Sample { temperature: f64, top_p: f64, seed: u64 },
}

impl DecodeMode {
    pub fn is_greedy(&self) -> bool {
        match self {
            DecodeMode::Greedy => true,
            DecodeMode::Sample { temperature, .. } => *temperature <= 1e-6,
        }
    }
}

/// Index of the largest allowed entry; the first wins ties.
pub fn argmax<T: Scalar>(row: &[T], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in row.iter().enumerate() {
        if allowed(i) && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Samples from the smallest high-probability set whose mass reaches `top_p`.
pub fn sample_top_p<T: Scalar, R: Rng + ?Sized>(
    row: &[T],
    allowed: impl Fn(usize) -> bool,
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Option<usize> {
    let mut cands: Vec<(usize, f64)> = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(i, &v)| (i, v.as_f64() / temperature))
        .collect();
    if cands.is_empty() {
        return None;
    }
    let max = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for c in cands.iter_mut() {
        c.1 = (c.1 - max).exp();
        total += c.1;
    }
    cands.iter_mut().for_each(|c| c.1 /= total);
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = 0;
    let mut mass = 0.0;
    for c in &cands {
        kept += 1;
        mass += c.1;
        if mass >= top_p {
            break;
        }
    }
    let cands = &cands[..kept];
    let mut u = rng.random::<f64>() * mass;
    for c in cands {
        u -= c.1;
        if u <= 0.0 {
            return Some(c.0);
        }
    }
    cands.last().map(|c| c.0)
}
