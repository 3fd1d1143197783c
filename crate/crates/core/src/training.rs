//! Training loop plumbing shared by the composer and performer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numerics::rng::{stream, STREAM_SHUFFLE};
use crate::numerics::{Adam, AdamConfig, Checkpoint, Gradients, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}

    fn on_checkpoint(&mut self, _step: u64, _checkpoint: &Checkpoint) -> std::io::Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// Collects every logged record in memory.
#[derive(Debug, Default)]
pub struct History {
    pub records: Vec<StepRecord>,
}

impl TrainObserver for History {
    fn on_step(&mut self, record: &StepRecord) {
        self.records.push(record.clone());
    }
}

/// Example indices for one optimizer step.
///
/// Examples are visited epoch by epoch in a seeded permutation, so the batch
/// at any step is a function of `(seed, n, step, batch)` alone and training
/// resumes exactly from a step counter.
pub fn batch_indices(seed: u64, n: usize, step: u64, batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..batch as u64 {
        let pos = step * batch as u64 + b;
        let epoch = pos / n as u64;
        let within = (pos % n as u64) as usize;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream(seed, &[STREAM_SHUFFLE, epoch]));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[within]);
    }
    out
}

/// Averages summed batch gradients, clips them and takes one Adam step.
/// Returns the gradient norm before clipping.
pub fn apply_update(
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    mut grads: Gradients<f32>,
    batch_len: usize,
    clip_norm: f64,
) -> f64 {
    grads.scale(1.0 / batch_len as f32);
    let norm = if clip_norm > 0.0 {
        grads.clip_norm(clip_norm as f32)
    } else {
        grads.global_norm()
    };
    adam.step(store, &grads);
    f64::from(norm)
}
