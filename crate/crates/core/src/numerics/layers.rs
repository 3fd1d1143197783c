use rand::Rng;

use super::graph::{AttentionMask, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rope::RotaryTable;
use super::tensor::Scalar;
use super::NumericsError;

pub const INIT_STD: f64 = 0.02;

/// `y = x W (+ b)` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        let weight = store.add_normal(format!("{name}.weight"), &[d_in, d_out], INIT_STD, rng)?;
        let bias = if bias {
            Some(store.add_full(format!("{name}.bias"), &[1, d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self, NumericsError> {
        Ok(Self {
            gain: store.add_full(format!("{name}.gain"), &[1, d], 1.0)?,
            bias: store.add_full(format!("{name}.bias"), &[1, d], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, NumericsError> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Config(format!(
                "hidden width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, false, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, false, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, false, rng)?,
            heads,
        })
    }

    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        x: Var,
        mask: AttentionMask,
        rope: Option<&'a RotaryTable<T>>,
    ) -> Result<Var, NumericsError> {
        let mut q = self.query.forward(g, x)?;
        let mut k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        if let Some(table) = rope {
            q = g.rope(q, table)?;
            k = g.rope(k, table)?;
        }
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.output.forward(g, a)
    }
}

/// Two-layer GELU MLP with a 4x expansion.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, 4 * d, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), 4 * d, d, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, NumericsError> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub attn_norm: LayerNormParams,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNormParams,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            attn_norm: LayerNormParams::new(store, &format!("{name}.attn_norm"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ffn_norm: LayerNormParams::new(store, &format!("{name}.ffn_norm"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, rng)?,
        })
    }

    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        x: Var,
        mask: AttentionMask,
        rope: Option<&'a RotaryTable<T>>,
    ) -> Result<Var, NumericsError> {
        let h = self.attn_norm.forward(g, x)?;
        let h = self.attn.forward(g, h, mask, rope)?;
        let h = g.dropout(h);
        let x = g.add(x, h)?;
        let h = self.ffn_norm.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        let h = g.dropout(h);
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_block_ignores_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, &mut rng).unwrap();
        let table = RotaryTable::new(4, 8, 10_000.0).unwrap();
        let base = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mut changed = base.clone();
        changed.data_mut()[3 * 8 + 1] += 0.7;
        let run = |x: Tensor<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.input(x);
            let y = block.forward(&mut g, xv, AttentionMask::Causal, Some(&table)).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(base), run(changed));
        assert_eq!(&a.data()[..3 * 8], &b.data()[..3 * 8]);
        assert_ne!(&a.data()[3 * 8..], &b.data()[3 * 8..]);
    }
}
