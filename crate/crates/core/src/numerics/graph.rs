//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every parameter and every gradient-tracking input reachable
//! from the loss. A parameter used in several places (tied embeddings) maps to
//! one node, so its gradient accumulates contributions from all uses.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::rope::RotaryTable;
use super::tensor::{matmul, matmul_acc, row_stats, softmax_in_place, transpose, Scalar, Tensor};
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMask {
    Bidirectional,
    Causal,
}

enum Op<'a, T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Rope {
        x: Var,
        table: &'a RotaryTable<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        // [heads, t, t]
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Row {
        x: Var,
        index: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, u32)>,
        // softmax of the target rows, in target order
        probs: Vec<T>,
    },
    KlFreeBits {
        mu: Var,
        logvar: Var,
        lambda: T,
    },
    Sum(Var),
}

struct Node<'a, T> {
    value: Tensor<T>,
    op: Op<'a, T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<'a, T>>,
    param_nodes: Vec<Option<Var>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

/// Result of [`Graph::backward`].
pub struct Grads<T> {
    params: Vec<Option<Vec<T>>>,
    leaves: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.index()).and_then(|g| g.as_deref())
    }

    /// Gradient of a gradient-tracking input created with [`Graph::input_with_grad`].
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.leaves.get(&var.0).map(Vec::as_slice)
    }

    pub fn into_gradients(self) -> Gradients<T> {
        Gradients::from_parts(self.params)
    }
}

/// Per-dimension Gaussian KL to the standard normal prior.
pub fn gaussian_kl_term<T: Scalar>(mu: T, logvar: T) -> T {
    T::of(-0.5) * (T::one() + logvar - mu * mu - logvar.exp())
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let value = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (value, deriv)
}

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            dropout: None,
        }
    }

    /// Enables dropout with rate `p`, drawing masks from `rng`.
    pub fn with_dropout(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, rng));
        }
        self
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<'a, T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Grads::wrt`].
    pub fn input_with_grad(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id), true);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    /// `a[m,k] * b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `a[m,k] * b[n,k]^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err(format!("matmul_t [{m},{k}] x [{n},{k2}]^T")));
        }
        let bt = transpose(self.value(b).data(), n, k);
        let out = matmul(self.value(a).data(), &bt, m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b), needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(x, &y)| *x += y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Adds a `[1,n]` row to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.dims(a);
        let (r, n2) = self.dims(row);
        if r != 1 || n != n2 {
            return Err(shape_err(format!("add_row: [{r},{n2}] onto width {n}")));
        }
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(&rv).for_each(|(x, &y)| *x += y);
        }
        let needs = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(x, &y)| *x *= y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= c);
        let needs = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.exp());
        let needs = self.needs(&[a]);
        self.push(out, Op::Exp(a), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = gelu(*x).0);
        let needs = self.needs(&[a]);
        self.push(out, Op::Gelu(a), needs)
    }

    /// Row-wise layer normalization with `[1,n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) || self.dims(bias) != (1, n) {
            return Err(shape_err(format!("layer_norm affine params must be [1,{n}]")));
        }
        let mut out = self.value(x).clone();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for row in out.data_mut().chunks_mut(n) {
            let (mean, rstd) = row_stats(row);
            for ((v, &gv), &bv) in row.iter_mut().zip(&g).zip(&b) {
                *v = (*v - mean) * rstd * gv + bv;
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            needs,
        ))
    }

    /// Gathers rows of `table[v,d]` by id into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, NumericsError> {
        let (v, d) = self.dims(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(shape_err(format!("embedding id {id} outside table of {v}")));
            }
            out.extend_from_slice(self.value(table).row_slice(id as usize));
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Rotary position embedding over rows `0..t`, per head of `table.head_dim()`.
    pub fn rope(&mut self, x: Var, table: &'a RotaryTable<T>) -> Result<Var, NumericsError> {
        let out = table.apply(self.value(x))?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Rope { x, table }, needs))
    }

    /// Multi-head scaled dot-product attention over `[t, d]` projections.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttentionMask,
    ) -> Result<Var, NumericsError> {
        let (t, d) = self.dims(q);
        if self.dims(k) != (t, d) || self.dims(v) != (t, d) {
            return Err(shape_err("attention: q, k, v must share shape".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        for h in 0..heads {
            let qh = head_slice(qd, t, d, h, dh);
            let kh = head_slice(kd, t, d, h, dh);
            let vh = head_slice(vd, t, d, h, dh);
            let kt = transpose(&kh, t, dh);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            matmul_acc(&qh, &kt, p, t, dh, t);
            for (i, row) in p.chunks_mut(t).enumerate() {
                row.iter_mut().for_each(|x| *x *= scale);
                if mask == AttentionMask::Causal {
                    row[i + 1..].iter_mut().for_each(|x| *x = T::neg_infinity());
                }
                softmax_in_place(row);
            }
            let oh = matmul(p, &vh, t, t, dh);
            scatter_head(&mut out, &oh, t, d, h, dh);
        }
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor::new(&[t, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Inverted dropout when enabled; identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let p = *p;
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, &m)| *v *= m);
        let needs = self.needs(&[x]);
        self.push(out, Op::Dropout { x, mask }, needs)
    }

    /// Row `index` of a 2-D value as `[1, n]`.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var, NumericsError> {
        let (m, _) = self.dims(x);
        if index >= m {
            return Err(shape_err(format!("row {index} of {m}")));
        }
        let out = Tensor::row(self.value(x).row_slice(index));
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Row { x, index }, needs))
    }

    /// Mean negative log-likelihood of `(row, class)` targets under row softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, u32)]) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(logits);
        if targets.is_empty() {
            return Err(shape_err("cross_entropy needs at least one target".into()));
        }
        let mut probs = Vec::with_capacity(targets.len() * n);
        let mut total = T::zero();
        for &(row, class) in targets {
            if row >= m || class as usize >= n {
                return Err(shape_err(format!("target ({row},{class}) outside [{m},{n}]")));
            }
            let mut p = self.value(logits).row_slice(row).to_vec();
            softmax_in_place(&mut p);
            total -= p[class as usize].max(T::min_positive_value()).ln();
            probs.extend_from_slice(&p);
        }
        let loss = total / T::of(targets.len() as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// `sum_k max(lambda, KL_k)` for a diagonal Gaussian against N(0, I).
    pub fn kl_free_bits(&mut self, mu: Var, logvar: Var, lambda: T) -> Result<Var, NumericsError> {
        self.same_shape(mu, logvar, "kl_free_bits")?;
        let total = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .map(|(&m, &lv)| gaussian_kl_term(m, lv).max(lambda))
            .sum::<T>();
        let needs = self.needs(&[mu, logvar]);
        Ok(self.push(Tensor::scalar(total), Op::KlFreeBits { mu, logvar, lambda }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut params = vec![None; self.store.len()];
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::Param(id) => {
                    params[id.index()] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    if self.nodes[a.0].needs_grad {
                        let bt = transpose(self.value(*b).data(), k, n);
                        self.acc_owned(&mut grads, *a, matmul(&g, &bt, m, n, k));
                    }
                    if self.nodes[b.0].needs_grad {
                        let at = transpose(self.value(*a).data(), m, k);
                        self.acc_owned(&mut grads, *b, matmul(&at, &g, k, m, n));
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).0;
                    if self.nodes[a.0].needs_grad {
                        self.acc_owned(&mut grads, *a, matmul(&g, self.value(*b).data(), m, n, k));
                    }
                    if self.nodes[b.0].needs_grad {
                        let gt = transpose(&g, m, n);
                        self.acc_owned(&mut grads, *b, matmul(&gt, self.value(*a).data(), n, m, k));
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, &g);
                    self.acc(&mut grads, *b, &g);
                }
                Op::AddRow(a, row) => {
                    self.acc(&mut grads, *a, &g);
                    if self.nodes[row.0].needs_grad {
                        let n = self.dims(*row).1;
                        let mut r = vec![T::zero(); n];
                        for chunk in g.chunks(n) {
                            r.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                        }
                        self.acc_owned(&mut grads, *row, r);
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if self.nodes[a.0].needs_grad {
                        let d = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                        self.acc_owned(&mut grads, *a, d);
                    }
                    if self.nodes[b.0].needs_grad {
                        let d = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                        self.acc_owned(&mut grads, *b, d);
                    }
                }
                Op::Scale(a, c) => {
                    let d = g.iter().map(|&x| x * *c).collect();
                    self.acc_owned(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = g.iter().zip(node.value.data()).map(|(&x, &y)| x * y).collect();
                    self.acc_owned(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let d = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * gelu(y).1)
                        .collect();
                    self.acc_owned(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    mean,
                    rstd,
                } => {
                    let (_, n) = self.dims(*x);
                    let xv = self.value(*x).data();
                    let gv = self.value(*gain).data();
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dgain = vec![T::zero(); n];
                    let mut dbias = vec![T::zero(); n];
                    let nf = T::of(n as f64);
                    for (r, (xrow, grow)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..n {
                            let xhat = (xrow[j] - mu) * rs;
                            let dxhat = grow[j] * gv[j];
                            dgain[j] += grow[j] * xhat;
                            dbias[j] += grow[j];
                            sum_d += dxhat;
                            sum_dx += dxhat * xhat;
                        }
                        let out = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            let xhat = (xrow[j] - mu) * rs;
                            out[j] = rs * (grow[j] * gv[j] - sum_d / nf - xhat * sum_dx / nf);
                        }
                    }
                    self.acc_owned(&mut grads, *x, dx);
                    self.acc_owned(&mut grads, *gain, dgain);
                    self.acc_owned(&mut grads, *bias, dbias);
                }
                Op::Embedding { table, ids } => {
                    if self.nodes[table.0].needs_grad {
                        let (v, d) = self.dims(*table);
                        let mut dt = vec![T::zero(); v * d];
                        for (r, &id) in ids.iter().enumerate() {
                            let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                            dst.iter_mut()
                                .zip(&g[r * d..(r + 1) * d])
                                .for_each(|(a, &b)| *a += b);
                        }
                        self.acc_owned(&mut grads, *table, dt);
                    }
                }
                Op::Rope { x, table } => {
                    let (t, d) = self.dims(*x);
                    let mut dx = g;
                    let positions: Vec<usize> = (0..t).collect();
                    table.rotate_rows(&mut dx, d, &positions, true)?;
                    self.acc_owned(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (t, d) = self.dims(*q);
                    let dh = d / heads;
                    let scale = T::one() / T::of(dh as f64).sqrt();
                    let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let mut dq = vec![T::zero(); t * d];
                    let mut dk = vec![T::zero(); t * d];
                    let mut dv = vec![T::zero(); t * d];
                    for h in 0..*heads {
                        let p = &probs[h * t * t..(h + 1) * t * t];
                        let go = head_slice(&g, t, d, h, dh);
                        let qh = head_slice(qd, t, d, h, dh);
                        let kh = head_slice(kd, t, d, h, dh);
                        let vh = head_slice(vd, t, d, h, dh);
                        // dV = P^T dO
                        let pt = transpose(p, t, t);
                        let dvh = matmul(&pt, &go, t, t, dh);
                        // dP = dO V^T
                        let vt = transpose(&vh, t, dh);
                        let mut ds = matmul(&go, &vt, t, dh, t);
                        for (prow, drow) in p.chunks(t).zip(ds.chunks_mut(t)) {
                            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                                *dv_ = pv * (*dv_ - dot) * scale;
                            }
                        }
                        let dqh = matmul(&ds, &kh, t, t, dh);
                        let dst = transpose(&ds, t, t);
                        let dkh = matmul(&dst, &qh, t, t, dh);
                        scatter_head(&mut dq, &dqh, t, d, h, dh);
                        scatter_head(&mut dk, &dkh, t, d, h, dh);
                        scatter_head(&mut dv, &dvh, t, d, h, dh);
                    }
                    self.acc_owned(&mut grads, *q, dq);
                    self.acc_owned(&mut grads, *k, dk);
                    self.acc_owned(&mut grads, *v, dv);
                }
                Op::Dropout { x, mask } => {
                    let d = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    self.acc_owned(&mut grads, *x, d);
                }
                Op::Row { x, index } => {
                    let (m, n) = self.dims(*x);
                    let mut d = vec![T::zero(); m * n];
                    d[index * n..(index + 1) * n].copy_from_slice(&g);
                    self.acc_owned(&mut grads, *x, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (m, n) = self.dims(*logits);
                    let mut d = vec![T::zero(); m * n];
                    let w = g[0] / T::of(targets.len() as f64);
                    for (i, &(row, class)) in targets.iter().enumerate() {
                        let p = &probs[i * n..(i + 1) * n];
                        let dst = &mut d[row * n..(row + 1) * n];
                        for (j, (dv_, &pv)) in dst.iter_mut().zip(p).enumerate() {
                            let target = if j == class as usize { T::one() } else { T::zero() };
                            *dv_ += w * (pv - target);
                        }
                    }
                    self.acc_owned(&mut grads, *logits, d);
                }
                Op::KlFreeBits { mu, logvar, lambda } => {
                    let mv = self.value(*mu).data();
                    let lv = self.value(*logvar).data();
                    let mut dmu = vec![T::zero(); mv.len()];
                    let mut dlv = vec![T::zero(); lv.len()];
                    let half = T::of(0.5);
                    for k in 0..mv.len() {
                        if gaussian_kl_term(mv[k], lv[k]) > *lambda {
                            dmu[k] = g[0] * mv[k];
                            dlv[k] = g[0] * half * (lv[k].exp() - T::one());
                        }
                    }
                    self.acc_owned(&mut grads, *mu, dmu);
                    self.acc_owned(&mut grads, *logvar, dlv);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    self.acc_owned(&mut grads, *x, vec![g[0]; n]);
                }
            }
        }
        Ok(Grads { params, leaves })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], var: Var, g: &[T]) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match grads[var.0].as_mut() {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => grads[var.0] = Some(g.to_vec()),
        }
    }

    fn acc_owned(&self, grads: &mut [Option<Vec<T>>], var: Var, g: Vec<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match grads[var.0].as_mut() {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => grads[var.0] = Some(g),
        }
    }
}

fn head_slice<T: Scalar>(data: &[T], t: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(t * dh);
    for r in 0..t {
        out.extend_from_slice(&data[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head<T: Scalar>(dst: &mut [T], src: &[T], t: usize, d: usize, h: usize, dh: usize) {
    for r in 0..t {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input_with_grad(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let values = vec![1.5, -2.0, 0.25];
        let x = g.input_with_grad(Tensor::row(&values));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), values.as_slice());
    }

    #[test]
    fn single_position_attention_copies_values() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let q = g.input(Tensor::row(&[1.0, 2.0, 3.0, 4.0]));
        let k = g.input(Tensor::row(&[-1.0, 0.0, 5.0, 1.0]));
        let v = g.input(Tensor::row(&[0.1, 0.2, 0.3, 0.4]));
        for mask in [AttentionMask::Causal, AttentionMask::Bidirectional] {
            let out = g.attention(q, k, v, 2, mask).unwrap();
            assert_eq!(g.value(out).data(), &[0.1, 0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn two_position_attention_closed_form() {
        // one head, d = 1: q = k = v = [1, 2]
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let q = g.input(x.clone());
        let k = g.input(x.clone());
        let v = g.input(x);
        let out = g.attention(q, k, v, 1, AttentionMask::Bidirectional).unwrap();
        // row 0 scores [1, 2]; row 1 scores [2, 4]
        let w0 = 1.0 / (1.0 + 1f64.exp());
        let w1 = 1.0 / (1.0 + 2f64.exp());
        let expected = [w0 * 1.0 + (1.0 - w0) * 2.0, w1 * 1.0 + (1.0 - w1) * 2.0];
        for (a, b) in g.value(out).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let causal = g.attention(q, k, v, 1, AttentionMask::Causal).unwrap();
        assert_eq!(g.value(causal).data()[0], 1.0);
    }

    #[test]
    fn tied_parameter_accumulates_both_uses() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let prod = g.matmul_t(a, b).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        // d/dW sum(W W^T) = 2 * colsum-broadcast: each entry = 2 * (sum of its column)
        assert_eq!(grads.param(w).unwrap(), &[8.0, 12.0, 8.0, 12.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input_with_grad(Tensor::row(&[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }
}
