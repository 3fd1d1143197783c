//! Rotary position embedding.
//!
//! Channel pair `(2i, 2i+1)` of each head at position `m` is rotated by
//! `m * base^(-2i/d_head)`. Because rotations compose, the dot product of a
//! rotated query at `m` with a rotated key at `n` depends only on `m - n`.

use super::tensor::{Scalar, Tensor};
use super::NumericsError;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone)]
pub struct RotaryTable<T> {
    head_dim: usize,
    max_positions: usize,
    base: f64,
    // [position, head_dim / 2]
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RotaryTable<T> {
    pub fn new(head_dim: usize, max_positions: usize, base: f64) -> Result<Self, NumericsError> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(NumericsError::Config(format!(
                "rotary embedding needs an even head dimension, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for m in 0..max_positions {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = m as f64 * theta;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Ok(Self {
            head_dim,
            max_positions,
            base,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// `(cos, sin)` of pair `i` at position `m`.
    pub fn entry(&self, m: usize, i: usize) -> (T, T) {
        let idx = m * self.head_dim / 2 + i;
        (self.cos[idx], self.sin[idx])
    }

    /// Rotates rows of `data` (`[t, heads * head_dim]`) in place; row `r` sits
    /// at position `positions[r]`. `inverse` rotates by the negated angle.
    pub(crate) fn rotate_rows(
        &self,
        data: &mut [T],
        cols: usize,
        positions: &[usize],
        inverse: bool,
    ) -> Result<(), NumericsError> {
        if cols % self.head_dim != 0 {
            return Err(NumericsError::Shape(format!(
                "width {cols} is not a multiple of head dimension {}",
                self.head_dim
            )));
        }
        let half = self.head_dim / 2;
        for (row, &m) in data.chunks_mut(cols).zip(positions) {
            if m >= self.max_positions {
                return Err(NumericsError::Shape(format!(
                    "position {m} beyond rotary table of {}",
                    self.max_positions
                )));
            }
            let cos = &self.cos[m * half..(m + 1) * half];
            let sin = &self.sin[m * half..(m + 1) * half];
            for head in row.chunks_mut(self.head_dim) {
                for i in 0..half {
                    let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                    let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                    head[2 * i] = x0 * c - x1 * s;
                    head[2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
        Ok(())
    }

    /// Rotates a `[t, k * head_dim]` tensor whose rows are positions `0..t`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
        let positions: Vec<usize> = (0..x.rows()).collect();
        self.apply_at(x, &positions)
    }

    /// Rotates rows of `x` at explicit positions.
    pub fn apply_at(&self, x: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>, NumericsError> {
        if positions.len() != x.rows() {
            return Err(NumericsError::Shape(format!(
                "{} positions for {} rows",
                positions.len(),
                x.rows()
            )));
        }
        let mut out = x.clone();
        let cols = x.cols();
        self.rotate_rows(out.data_mut(), cols, positions, false)?;
        Ok(out)
    }
}

/// Rotates query and key rows (`[t, d_head]` each) by their positions.
pub fn rope_apply<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    table: &RotaryTable<T>,
) -> Result<(Tensor<T>, Tensor<T>), NumericsError> {
    Ok((table.apply(q)?, table.apply(k)?))
}
