//! Central finite differences against analytic gradients, in f64.

use cadenza_core::composer::{Composer, ComposerConfig};
use cadenza_core::numerics::{ParamStore, Tensor};
use cadenza_core::performer::{MaskedExample, Performer, PerformerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// ||analytic - numeric|| / (||analytic|| + ||numeric||) over every parameter.
pub fn check_store(
    store: &mut ParamStore<f64>,
    loss: impl Fn(&ParamStore<f64>) -> f64,
    analytic: impl Fn(&ParamStore<f64>) -> Vec<Option<Vec<f64>>>,
) -> f64 {
    let grads = analytic(store);
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + STEP;
            let up = loss(store);
            store.get_mut(id).data_mut()[j] = orig - STEP;
            let down = loss(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grads[id.index()].as_ref().map_or(0.0, |g| g[j]);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    assert!(na > 0.0, "gradient is identically zero");
    diff.sqrt() / (na.sqrt() + nn.sqrt())
}

pub fn composer_gradient_error() -> f64 {
    let config = ComposerConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        latent: 4,
        max_seq_len: 8,
        vocab_size: 12,
        dropout: 0.0,
        free_bits: 0.0,
        ..ComposerConfig::default()
    };
    let mut model = Composer::<f64>::new(config, 21).unwrap();
    assert!(model.num_parameters() <= 5000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let shape = model.store().get(id).shape().to_vec();
        *model.store_mut().get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
    }
    let seq = [1u32, 7, 4];
    let eps = [0.3, -1.1, 0.5, 0.8];
    let template = model.clone();
    let with = |s: &ParamStore<f64>| {
        let mut m = template.clone();
        *m.store_mut() = s.clone();
        m
    };
    let mut store = model.store().clone();
    check_store(
        &mut store,
        |s| with(s).loss(&seq, &eps, 1.0).unwrap().total,
        |s| {
            let m = with(s);
            let (_, g) = m.loss_and_grads(&seq, &eps, 1.0, None).unwrap();
            s.ids().map(|id| g.get(id).map(<[f64]>::to_vec)).collect()
        },
    )
}

pub fn performer_gradient_error() -> f64 {
    let config = PerformerConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        dropout: 0.0,
        max_seq_len: 8,
        vocab_size: 12,
    };
    let mut model = Performer::<f64>::new(config, 4).unwrap();
    assert!(model.num_parameters() <= 5000);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let shape = model.store().get(id).shape().to_vec();
        *model.store_mut().get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
    }
    let example = MaskedExample {
        input: vec![1, 5, 3, 3, 9, 2],
        targets: vec![(2, 7), (3, 10)],
    };
    let template = model.clone();
    let with = |s: &ParamStore<f64>| {
        let mut m = template.clone();
        *m.store_mut() = s.clone();
        m
    };
    let mut store = model.store().clone();
    check_store(
        &mut store,
        |s| with(s).loss(&example).unwrap(),
        |s| {
            let (_, g) = with(s).loss_and_grads(&example, None).unwrap();
            s.ids().map(|id| g.get(id).map(<[f64]>::to_vec)).collect()
        },
    )
}
