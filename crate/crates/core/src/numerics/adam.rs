use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter, aligned with the store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| s.ids().map(|id| vec![T::zero(); s.get(id).len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }

    pub(crate) fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// One update. Parameters without a gradient are left untouched, as are their moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (lr_t, c1_t, c2_t, eps_t) = (T::of(lr), T::of(c1), T::of(c2), T::of(eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let mhat = m[j] / c1_t;
                let vhat = v[j] / c2_t;
                p[j] -= lr_t * mhat / (vhat.sqrt() + eps_t);
            }
        }
    }
}

/// Stand-alone update on raw slices.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    config: &AdamConfig,
) {
    let t = step as i32;
    let c1 = T::of(1.0 - config.beta1.powi(t));
    let c2 = T::of(1.0 - config.beta2.powi(t));
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    for j in 0..params.len() {
        m[j] = b1 * m[j] + (T::one() - b1) * grads[j];
        v[j] = b2 * v[j] + (T::one() - b2) * grads[j] * grads[j];
        params[j] -= T::of(config.lr) * (m[j] / c1) / ((v[j] / c2).sqrt() + T::of(config.eps));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::row(&[1.0, -2.0])).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        let grads = Gradients::from_parts(vec![Some(vec![0.0, 0.0])]);
        adam.step(&mut store, &grads);
        assert_eq!(store.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::row(&[0.0, 0.0, 0.0])).unwrap();
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut adam = Adam::new(cfg, &store);
        let grads = Gradients::from_parts(vec![Some(vec![3.0, -0.5, 1e-3])]);
        adam.step(&mut store, &grads);
        for (p, s) in store.get(id).data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * 0.01).abs() < 1e-7, "{p}");
        }
    }

    #[test]
    fn quadratic_converges() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let (mut w, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        for step in 1..=100 {
            let g = [2.0 * (w[0] - 3.0)];
            adam_step(&mut w, &g, &mut m, &mut v, step, &cfg);
        }
        assert!((w[0] - 3.0).abs() < 0.5, "{}", w[0]);
    }
}
