//! Transformer VAE over score-token sequences.
//!
//! The encoder reads a whole sequence bidirectionally and pools the first
//! position into a hidden vector, which is projected to a diagonal Gaussian
//! posterior. The decoder is causal; a projection of the latent sample is
//! added to the hidden state of every position before each decoder block.
//! Input embedding and output projection share one matrix.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::numerics::rng::{stream, STREAM_DROPOUT, STREAM_EPSILON, STREAM_INIT, STREAM_SAMPLE};
use crate::numerics::{
    Adam, AttentionMask, Checkpoint, Gradients, Graph, LayerNormParams, Linear, NumericsError, ParamId,
    ParamStore, RotaryTable, Scalar, Tensor, TransformerBlock, Var, DEFAULT_ROPE_BASE,
};
use crate::pertok::{close_score_sequence, ScoreGrammar, Token, Tokenizer, TokenizerConfig, TokenizerError};
use crate::sampling::{argmax, sample_top_p};
use crate::training::{apply_update, batch_indices, StepRecord, TrainConfig, TrainObserver};

pub use crate::sampling::DecodeMode;

pub const CHECKPOINT_KIND: &str = "composer";

#[derive(Debug, Error)]
pub enum ComposerError {
    #[error("invalid composer config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence needs at least {min} tokens, got {len}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("latent vector has {got} dimensions, model expects {expected}")]
    LatentDim { got: usize, expected: usize },
    #[error("tokenizer vocabulary has {found} entries, checkpoint expects {expected}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// KL weight over training steps: a linear warm-up envelope times a cosine cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BetaSchedule {
    pub beta_max: f64,
    /// Steps held at zero before the ramp.
    pub warmup_steps: u64,
    /// Length of the linear ramp to `beta_max`; zero jumps straight to it.
    pub anneal_steps: u64,
    /// Cosine cycle period; zero disables cycling.
    pub cycle_steps: u64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta_max: 1.0,
            warmup_steps: 25_000,
            anneal_steps: 25_000,
            cycle_steps: 10_000,
        }
    }
}

impl BetaSchedule {
    pub fn constant(beta: f64) -> Self {
        Self {
            beta_max: beta,
            warmup_steps: 0,
            anneal_steps: 0,
            cycle_steps: 0,
        }
    }

    pub fn envelope(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            0.0
        } else if step < self.warmup_steps + self.anneal_steps {
            self.beta_max * (step - self.warmup_steps) as f64 / self.anneal_steps as f64
        } else {
            self.beta_max
        }
    }

    pub fn cycle(&self, step: u64) -> f64 {
        if self.cycle_steps == 0 {
            return 1.0;
        }
        let phase = (step % self.cycle_steps) as f64 / self.cycle_steps as f64;
        0.5 * (1.0 - (2.0 * std::f64::consts::PI * phase).cos())
    }

    pub fn at(&self, step: u64) -> f64 {
        self.envelope(step) * self.cycle(step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComposerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub latent: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub free_bits: f64,
    pub beta: BetaSchedule,
    pub rope_base: f64,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            heads: 8,
            hidden: 512,
            latent: 128,
            max_seq_len: 512,
            vocab_size: 0,
            dropout: 0.1,
            free_bits: 0.15,
            beta: BetaSchedule::default(),
            rope_base: DEFAULT_ROPE_BASE,
        }
    }
}

impl ComposerConfig {
    /// Small model that trains in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            latent: 16,
            max_seq_len: 256,
            vocab_size,
            beta: BetaSchedule {
                beta_max: 1.0,
                warmup_steps: 250,
                anneal_steps: 250,
                cycle_steps: 100,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ComposerError> {
        let bad = |m: String| Err(ComposerError::Config(m));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.latent == 0 {
            return bad("layers, heads, hidden and latent must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if (self.hidden / self.heads) % 2 != 0 {
            return bad("rotary positions need an even head dimension".into());
        }
        if self.latent > self.hidden {
            return bad(format!("latent {} exceeds hidden {}", self.latent, self.hidden));
        }
        if self.vocab_size < 5 {
            return bad("vocab_size must cover the special tokens".into());
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if self.free_bits < 0.0 || self.beta.beta_max < 0.0 {
            return bad("free_bits and beta_max must be non-negative".into());
        }
        Ok(())
    }
}

/// Posterior parameters with the sample drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
    pub z: Vec<T>,
}

/// `z = mu + exp(logvar / 2) * eps`
pub fn reparameterize<T: Scalar>(mu: &[T], logvar: &[T], eps: &[T]) -> LatentState<T> {
    let z = mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (T::of(0.5) * lv).exp() * e)
        .collect();
    LatentState {
        mu: mu.to_vec(),
        logvar: logvar.to_vec(),
        z,
    }
}

/// `sum_k max(lambda, KL_k)` with `KL_k = -(1 + logvar - mu^2 - exp(logvar)) / 2`.
pub fn kl_free_bits<T: Scalar>(mu: &[T], logvar: &[T], lambda: T) -> T {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| crate::numerics::gaussian_kl_term(m, lv).max(lambda))
        .sum()
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::of(x)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComposerLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Graph handles produced by one loss evaluation.
pub struct LossVars {
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
    pub mu: Var,
    pub logvar: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Composer<T: Scalar> {
    config: ComposerConfig,
    store: ParamStore<T>,
    embedding: ParamId,
    encoder: Vec<TransformerBlock>,
    encoder_norm: LayerNormParams,
    to_mu: Linear,
    to_logvar: Linear,
    latent_proj: Linear,
    decoder: Vec<TransformerBlock>,
    decoder_norm: LayerNormParams,
    rope: RotaryTable<T>,
}

impl<T: Scalar> Composer<T> {
    pub fn new(config: ComposerConfig, seed: u64) -> Result<Self, ComposerError> {
        config.validate()?;
        let mut rng = stream(seed, &[STREAM_INIT]);
        let mut store = ParamStore::new();
        let d = config.hidden;
        let embedding = store.add_normal("embedding", &[config.vocab_size, d], 0.02, &mut rng)?;
        let encoder = (0..config.layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("encoder.{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let encoder_norm = LayerNormParams::new(&mut store, "encoder.norm", d)?;
        let to_mu = Linear::new(&mut store, "latent.mu", d, config.latent, false, &mut rng)?;
        let to_logvar = Linear::new(&mut store, "latent.logvar", d, config.latent, false, &mut rng)?;
        let latent_proj = Linear::new(&mut store, "latent.expand", config.latent, d, false, &mut rng)?;
        let decoder = (0..config.layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("decoder.{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let decoder_norm = LayerNormParams::new(&mut store, "decoder.norm", d)?;
        let rope = RotaryTable::new(d / config.heads, config.max_seq_len, config.rope_base)?;
        Ok(Self {
            config,
            store,
            embedding,
            encoder,
            encoder_norm,
            to_mu,
            to_logvar,
            latent_proj,
            decoder,
            decoder_norm,
            rope,
        })
    }

    pub fn config(&self) -> &ComposerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Composer<U> {
        let mut other = Composer::<U>::new(self.config.clone(), 0).expect("config already validated");
        other.store = self.store.cast();
        other
    }

    fn check_ids(&self, ids: &[u32], min: usize) -> Result<(), ComposerError> {
        if ids.len() < min {
            return Err(ComposerError::SequenceTooShort { len: ids.len(), min });
        }
        if ids.len() > self.config.max_seq_len {
            return Err(ComposerError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ComposerError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_latent(&self, z: &[T]) -> Result<(), ComposerError> {
        if z.len() != self.config.latent {
            return Err(ComposerError::LatentDim {
                got: z.len(),
                expected: self.config.latent,
            });
        }
        Ok(())
    }

    /// Pooled encoder output `[1, hidden]`.
    pub fn encoder_var<'a>(&'a self, g: &mut Graph<'a, T>, ids: &[u32]) -> Result<Var, ComposerError> {
        self.check_ids(ids, 1)?;
        let table = g.param(self.embedding);
        let mut x = g.embedding(table, ids)?;
        x = g.dropout(x);
        for block in &self.encoder {
            x = block.forward(g, x, AttentionMask::Bidirectional, Some(&self.rope))?;
        }
        x = self.encoder_norm.forward(g, x)?;
        Ok(g.row(x, 0)?)
    }

    pub fn posterior_vars(&self, g: &mut Graph<'_, T>, h: Var) -> Result<(Var, Var), ComposerError> {
        Ok((self.to_mu.forward(g, h)?, self.to_logvar.forward(g, h)?))
    }

    /// Next-token logits `[prev.len(), vocab]` given a latent row `[1, latent]`.
    pub fn decoder_var<'a>(&'a self, g: &mut Graph<'a, T>, prev: &[u32], z: Var) -> Result<Var, ComposerError> {
        self.check_ids(prev, 1)?;
        let table = g.param(self.embedding);
        let mut x = g.embedding(table, prev)?;
        x = g.dropout(x);
        let expanded = self.latent_proj.forward(g, z)?;
        for block in &self.decoder {
            x = g.add_row(x, expanded)?;
            x = block.forward(g, x, AttentionMask::Causal, Some(&self.rope))?;
        }
        x = self.decoder_norm.forward(g, x)?;
        Ok(g.matmul_t(x, table)?)
    }

    /// Teacher-forced reconstruction loss plus the weighted free-bits KL term.
    pub fn loss_vars<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        ids: &[u32],
        eps: &[T],
        beta: T,
    ) -> Result<LossVars, ComposerError> {
        self.check_ids(ids, 2)?;
        self.check_latent(eps)?;
        let h = self.encoder_var(g, ids)?;
        let (mu, logvar) = self.posterior_vars(g, h)?;
        let half = g.scale(logvar, T::of(0.5));
        let std = g.exp(half);
        let noise = g.input(Tensor::row(eps));
        let spread = g.mul(std, noise)?;
        let z = g.add(mu, spread)?;
        let logits = self.decoder_var(g, &ids[..ids.len() - 1], z)?;
        let targets: Vec<(usize, u32)> = ids[1..].iter().enumerate().map(|(i, &t)| (i, t)).collect();
        let recon = g.cross_entropy(logits, &targets)?;
        let kl = g.kl_free_bits(mu, logvar, T::of(self.config.free_bits))?;
        let weighted = g.scale(kl, beta);
        let total = g.add(recon, weighted)?;
        Ok(LossVars {
            recon,
            kl,
            total,
            mu,
            logvar,
            logits,
        })
    }

    /// Pooled hidden vector of the encoder.
    pub fn encode_latent(&self, ids: &[u32]) -> Result<Vec<T>, ComposerError> {
        let mut g = Graph::new(&self.store);
        let h = self.encoder_var(&mut g, ids)?;
        Ok(g.value(h).data().to_vec())
    }

    /// Posterior mean and log-variance for a sequence.
    pub fn posterior(&self, ids: &[u32]) -> Result<(Vec<T>, Vec<T>), ComposerError> {
        let mut g = Graph::new(&self.store);
        let h = self.encoder_var(&mut g, ids)?;
        let (mu, lv) = self.posterior_vars(&mut g, h)?;
        Ok((g.value(mu).data().to_vec(), g.value(lv).data().to_vec()))
    }

    /// Projects a pooled vector to the posterior and samples with the given noise.
    pub fn reparameterize(&self, h: &[T], eps: &[T]) -> Result<LatentState<T>, ComposerError> {
        self.check_latent(eps)?;
        if h.len() != self.config.hidden {
            return Err(ComposerError::Config(format!(
                "pooled vector has {} entries, expected {}",
                h.len(),
                self.config.hidden
            )));
        }
        let mut g = Graph::new(&self.store);
        let hv = g.input(Tensor::row(h));
        let (mu, lv) = self.posterior_vars(&mut g, hv)?;
        Ok(reparameterize(g.value(mu).data(), g.value(lv).data(), eps))
    }

    pub fn decode_forward(&self, prev: &[u32], z: &[T]) -> Result<Tensor<T>, ComposerError> {
        self.check_latent(z)?;
        let mut g = Graph::new(&self.store);
        let zv = g.input(Tensor::row(z));
        let logits = self.decoder_var(&mut g, prev, zv)?;
        Ok(g.value(logits).clone())
    }

    pub fn loss(&self, ids: &[u32], eps: &[T], beta: f64) -> Result<ComposerLoss, ComposerError> {
        let mut g = Graph::new(&self.store);
        let v = self.loss_vars(&mut g, ids, eps, T::of(beta))?;
        Ok(ComposerLoss {
            recon: g.value(v.recon).item().as_f64(),
            kl: g.value(v.kl).item().as_f64(),
            total: g.value(v.total).item().as_f64(),
        })
    }

    /// Loss and parameter gradients; dropout is active when `dropout_rng` is given.
    pub fn loss_and_grads(
        &self,
        ids: &[u32],
        eps: &[T],
        beta: f64,
        dropout_rng: Option<ChaCha8Rng>,
    ) -> Result<(ComposerLoss, Gradients<T>), ComposerError> {
        let mut g = Graph::new(&self.store);
        if let Some(rng) = dropout_rng {
            g = g.with_dropout(self.config.dropout, rng);
        }
        let v = self.loss_vars(&mut g, ids, eps, T::of(beta))?;
        let loss = ComposerLoss {
            recon: g.value(v.recon).item().as_f64(),
            kl: g.value(v.kl).item().as_f64(),
            total: g.value(v.total).item().as_f64(),
        };
        Ok((loss, g.backward(v.total)?.into_gradients()))
    }

    /// Teacher-forced next-token hits with `z` set to the posterior mean.
    pub fn reconstruction_hits(&self, ids: &[u32]) -> Result<(usize, usize), ComposerError> {
        let (mu, _) = self.posterior(ids)?;
        let logits = self.decode_forward(&ids[..ids.len() - 1], &mu)?;
        let hits = ids[1..]
            .iter()
            .enumerate()
            .filter(|&(i, &t)| argmax(logits.row_slice(i), |_| true) == Some(t as usize))
            .count();
        Ok((hits, ids.len() - 1))
    }

    /// Autoregressive decoding from BOS, constrained to canonical score tokens.
    pub fn generate(
        &self,
        z: &[T],
        tokenizer: &Tokenizer,
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<Vec<Token>, ComposerError> {
        self.check_latent(z)?;
        let vocab = tokenizer.vocab();
        if vocab.len() != self.config.vocab_size {
            return Err(ComposerError::VocabMismatch {
                expected: self.config.vocab_size,
                found: vocab.len(),
            });
        }
        let max_len = max_len.clamp(2, self.config.max_seq_len);
        let mut rng = match mode {
            DecodeMode::Sample { seed, .. } => Some(stream(seed, &[STREAM_SAMPLE])),
            DecodeMode::Greedy => None,
        };
        let mut grammar = ScoreGrammar::new(tokenizer.config());
        grammar.advance(&Token::Bos);
        let mut tokens = vec![Token::Bos];
        let mut ids = vec![vocab.id(&Token::Bos).expect("BOS in vocabulary")];
        while ids.len() < max_len && !grammar.is_done() {
            let logits = self.decode_forward(&ids, z)?;
            let last = logits.row_slice(ids.len() - 1);
            let allowed = |id: usize| vocab.token(id as u32).is_some_and(|t| grammar.allows(&t));
            let choice = match (mode, rng.as_mut()) {
                (DecodeMode::Sample { temperature, top_p, .. }, Some(rng)) if temperature > 1e-6 => {
                    sample_top_p(last, allowed, temperature, top_p, rng)
                }
                _ => argmax(last, allowed),
            };
            let Some(id) = choice else { break };
            let token = vocab.token(id as u32).expect("id from vocabulary range");
            grammar.advance(&token);
            tokens.push(token);
            ids.push(id as u32);
        }
        Ok(close_score_sequence(&tokens, tokenizer.config()))
    }

    pub fn to_checkpoint(&self, tokenizer: &TokenizerConfig, adam: Option<&Adam<T>>, extra: serde_json::Value) -> Checkpoint {
        let config = json!({
            "kind": CHECKPOINT_KIND,
            "model": self.config,
            "tokenizer": tokenizer,
            "training": extra,
        });
        Checkpoint::capture(config, &self.store, adam)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, TokenizerConfig), ComposerError> {
        let kind = ckpt.config.get("kind").and_then(|k| k.as_str());
        if kind != Some(CHECKPOINT_KIND) {
            return Err(ComposerError::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {kind:?}"
            )));
        }
        let field = |name: &str| {
            ckpt.config
                .get(name)
                .cloned()
                .ok_or_else(|| ComposerError::Checkpoint(format!("config lacks `{name}`")))
        };
        let config: ComposerConfig =
            serde_json::from_value(field("model")?).map_err(|e| ComposerError::Checkpoint(e.to_string()))?;
        let tokenizer: TokenizerConfig =
            serde_json::from_value(field("tokenizer")?).map_err(|e| ComposerError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        ckpt.restore_params(&mut model.store)?;
        Ok((model, tokenizer))
    }
}

/// Optimizer state plus the data it walks over.
pub struct ComposerTrainer {
    pub model: Composer<f32>,
    pub adam: Adam<f32>,
    pub train: TrainConfig,
    pub tokenizer: TokenizerConfig,
    pub seed: u64,
    corpus: Vec<Vec<u32>>,
}

impl ComposerTrainer {
    pub fn new(
        config: ComposerConfig,
        tokenizer: TokenizerConfig,
        train: TrainConfig,
        corpus: Vec<Vec<u32>>,
        seed: u64,
    ) -> Result<Self, ComposerError> {
        let model = Composer::new(config, seed)?;
        Self::with_model(model, tokenizer, train, corpus, seed)
    }

    fn with_model(
        model: Composer<f32>,
        tokenizer: TokenizerConfig,
        train: TrainConfig,
        corpus: Vec<Vec<u32>>,
        seed: u64,
    ) -> Result<Self, ComposerError> {
        if corpus.is_empty() {
            return Err(ComposerError::EmptyCorpus);
        }
        for seq in &corpus {
            model.check_ids(seq, 2)?;
        }
        if train.batch_size == 0 {
            return Err(ComposerError::Config("batch_size must be positive".into()));
        }
        let adam = Adam::new(train.adam, model.store());
        Ok(Self {
            model,
            adam,
            train,
            tokenizer,
            seed,
            corpus,
        })
    }

    /// Continues a run from a checkpoint written by [`ComposerTrainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, corpus: Vec<Vec<u32>>) -> Result<Self, ComposerError> {
        let (model, tokenizer) = Composer::from_checkpoint(ckpt)?;
        let training = ckpt.config.get("training").cloned().unwrap_or_default();
        let train: TrainConfig = training
            .get("train")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| ComposerError::Checkpoint(e.to_string()))?
            .unwrap_or_default();
        let seed = training.get("seed").and_then(|s| s.as_u64()).unwrap_or(0);
        let mut trainer = Self::with_model(model, tokenizer, train, corpus, seed)?;
        let store = trainer.model.store.clone();
        ckpt.restore_adam(&store, &mut trainer.adam)?;
        Ok(trainer)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn step(&mut self) -> Result<StepRecord, ComposerError> {
        let step = self.adam.step;
        let beta = self.model.config.beta.at(step);
        let batch = batch_indices(self.seed, self.corpus.len(), step, self.train.batch_size);
        let mut grads = Gradients::empty(self.model.store.len());
        let (mut recon, mut kl, mut total) = (0.0, 0.0, 0.0);
        for (b, &idx) in batch.iter().enumerate() {
            let eps = standard_normal(self.model.config.latent, &mut stream(self.seed, &[STREAM_EPSILON, step, b as u64]));
            let dropout = (self.model.config.dropout > 0.0)
                .then(|| stream(self.seed, &[STREAM_DROPOUT, step, b as u64]));
            let (loss, g) = self.model.loss_and_grads(&self.corpus[idx], &eps, beta, dropout)?;
            grads.accumulate(&g);
            recon += loss.recon;
            kl += loss.kl;
            total += loss.total;
        }
        let n = batch.len() as f64;
        let norm = apply_update(&mut self.model.store, &mut self.adam, grads, batch.len(), self.train.clip_norm);
        Ok(StepRecord {
            step: self.adam.step,
            loss: total / n,
            recon: Some(recon / n),
            kl: Some(kl / n),
            beta: Some(beta),
            grad_norm: norm,
        })
    }

    /// Trains until `train.steps`, reporting to `observer`.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<(), ComposerError> {
        while self.adam.step < self.train.steps {
            let record = self.step()?;
            let s = record.step;
            if self.train.log_every > 0 && (s % self.train.log_every == 0 || s == self.train.steps) {
                observer.on_step(&record);
            }
            if self.train.checkpoint_every > 0 && s % self.train.checkpoint_every == 0 {
                observer
                    .on_checkpoint(s, &self.checkpoint())
                    .map_err(|e| ComposerError::Numerics(e.into()))?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let extra = json!({ "train": self.train, "seed": self.seed, "step": self.adam.step });
        self.model.to_checkpoint(&self.tokenizer, Some(&self.adam), extra)
    }
}

/// Trains a composer on score-token id sequences.
pub fn train_composer(
    corpus: Vec<Vec<u32>>,
    config: ComposerConfig,
    tokenizer: TokenizerConfig,
    train: TrainConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<ComposerTrainer, ComposerError> {
    let mut trainer = ComposerTrainer::new(config, tokenizer, train, corpus, seed)?;
    trainer.run(observer)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ComposerConfig {
        ComposerConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            latent: 4,
            max_seq_len: 16,
            vocab_size: vocab,
            dropout: 0.0,
            ..ComposerConfig::default()
        }
    }

    #[test]
    fn free_bits_unit_values() {
        let zeros = vec![0.0f64; 128];
        assert!((kl_free_bits(&zeros, &zeros, 0.15) - 19.2).abs() < 1e-9);
        assert_eq!(kl_free_bits(&zeros, &zeros, 0.0), 0.0);
        assert_eq!(kl_free_bits(&[1.0f64], &[0.0], 0.0), 0.5);
    }

    #[test]
    fn schedule_shape() {
        let s = BetaSchedule::default();
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(24_999), 0.0);
        assert!((s.at(55_000) - 1.0).abs() < 1e-12);
        assert_eq!(s.at(60_000), 0.0);
        assert!((s.envelope(37_500) - 0.5).abs() < 1e-12);
        assert_eq!(BetaSchedule::constant(0.3).at(12_345), 0.3);
    }

    #[test]
    fn zero_noise_gives_mean() {
        let st = reparameterize(&[0.5f64, -1.0], &[0.3, -2.0], &[0.0, 0.0]);
        assert_eq!(st.z, st.mu);
        let st = reparameterize(&[0.5f64], &[0.0], &[1.25]);
        assert_eq!(st.z, vec![1.75]);
    }

    #[test]
    fn config_rejects_bad_shapes() {
        let mut c = tiny(20);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(20);
        c.latent = 9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn too_long_sequence_is_an_error() {
        let m = Composer::<f64>::new(tiny(20), 1).unwrap();
        assert!(matches!(
            m.encode_latent(&[5; 17]),
            Err(ComposerError::SequenceTooLong { len: 17, max: 16 })
        ));
        assert!(m.encode_latent(&[5]).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn beta_zero_total_is_recon() {
        let m = Composer::<f64>::new(tiny(20), 2).unwrap();
        let l = m.loss(&[1, 7, 9, 2], &[0.1, -0.2, 0.3, 0.0], 0.0).unwrap();
        assert_eq!(l.total, l.recon);
    }

    #[test]
    fn greedy_decoding_is_deterministic_and_canonical() {
        let tok = Tokenizer::new(TokenizerConfig {
            use_velocity: false,
            use_microshift: false,
            pitch_min: 60,
            pitch_max: 64,
            ..TokenizerConfig::with_resolution(8)
        })
        .unwrap();
        let mut c = tiny(tok.vocab().len());
        c.max_seq_len = 24;
        let m = Composer::<f32>::new(c, 5).unwrap();
        let z = vec![0.3f32, -0.1, 0.8, 0.0];
        let a = m.generate(&z, &tok, DecodeMode::Greedy, 24).unwrap();
        let b = m.generate(&z, &tok, DecodeMode::Greedy, 24).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.first(), Some(&Token::Bos));
        assert_eq!(a.last(), Some(&Token::Eos));
        tok.decode(&a).unwrap();
        let cold = DecodeMode::Sample { temperature: 1e-9, top_p: 0.9, seed: 4 };
        assert_eq!(m.generate(&z, &tok, cold, 24).unwrap(), a);
    }
}
