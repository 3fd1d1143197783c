//! Bidirectional encoder that fills in velocity and microshift tokens.
//!
//! Every performance token of a training sequence is replaced by its own
//! MASK token; the loss is cross-entropy at those positions only. At
//! inference each masked slot takes the best token of the kind it stands for,
//! and composition tokens pass through untouched.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::numerics::rng::{stream, STREAM_DROPOUT, STREAM_INIT, STREAM_SAMPLE};
use crate::numerics::{
    sinusoidal_positions, Adam, AttentionMask, Checkpoint, Gradients, Graph, LayerNormParams, NumericsError,
    ParamId, ParamStore, Scalar, Tensor, TransformerBlock, Var,
};
use crate::pertok::{mask_performance, Token, TokenKind, Tokenizer, TokenizerConfig, TokenizerError};
use crate::sampling::{argmax, sample_top_p, DecodeMode};
use crate::training::{apply_update, batch_indices, StepRecord, TrainConfig, TrainObserver};

pub const CHECKPOINT_KIND: &str = "performer";

#[derive(Debug, Error)]
pub enum PerformerError {
    #[error("invalid performer config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("tokenizer vocabulary has {found} entries, checkpoint expects {expected}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("tokenizer has neither velocity nor microshift tokens to predict")]
    NothingToPredict,
    #[error("{kind:?} token at index {index} does not follow a pitch")]
    StrayPerformanceToken { index: usize, kind: TokenKind },
    #[error("no training sequence contains performance tokens")]
    EmptyCorpus,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for PerformerConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            heads: 12,
            hidden: 768,
            dropout: 0.1,
            max_seq_len: 512,
            vocab_size: 0,
        }
    }
}

impl PerformerConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 32,
            max_seq_len: 256,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PerformerError> {
        let bad = |m: String| Err(PerformerError::Config(m));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return bad("layers, heads and hidden must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab_size < 5 {
            return bad("vocab_size must cover the special tokens".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits` rows at `(position, target id)` pairs.
pub fn performer_loss<T: Scalar>(logits: &Tensor<T>, targets: &[(usize, u32)]) -> T {
    let mut total = T::zero();
    for &(row, target) in targets {
        let r = logits.row_slice(row);
        let max = r.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = r.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - r[target as usize];
    }
    total / T::of(targets.len() as f64)
}

/// A masked training example: input ids and the `(position, original id)` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub input: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

/// Masks every performance token of a tokenized sequence.
pub fn masked_example(tokens: &[Token], tokenizer: &Tokenizer) -> Result<MaskedExample, PerformerError> {
    let vocab = tokenizer.vocab();
    let (masked, slots) = mask_performance(tokens);
    let input = vocab.encode_ids(&masked)?;
    let targets = slots
        .iter()
        .map(|s| Ok((s.position, vocab.id(&s.original).ok_or(TokenizerError::UnknownToken {
            index: s.position,
            token: s.original,
        })?)))
        .collect::<Result<Vec<_>, TokenizerError>>()?;
    Ok(MaskedExample { input, targets })
}

#[derive(Debug, Clone)]
pub struct Performer<T: Scalar> {
    config: PerformerConfig,
    store: ParamStore<T>,
    embedding: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNormParams,
    positions: Tensor<T>,
}

impl<T: Scalar> Performer<T> {
    pub fn new(config: PerformerConfig, seed: u64) -> Result<Self, PerformerError> {
        config.validate()?;
        let mut rng = stream(seed, &[STREAM_INIT]);
        let mut store = ParamStore::new();
        let d = config.hidden;
        let embedding = store.add_normal("embedding", &[config.vocab_size, d], 0.02, &mut rng)?;
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("encoder.{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let norm = LayerNormParams::new(&mut store, "encoder.norm", d)?;
        let positions = sinusoidal_positions(config.max_seq_len, d);
        Ok(Self {
            config,
            store,
            embedding,
            blocks,
            norm,
            positions,
        })
    }

    pub fn config(&self) -> &PerformerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    pub fn cast<U: Scalar>(&self) -> Performer<U> {
        let mut other = Performer::<U>::new(self.config.clone(), 0).expect("config already validated");
        other.store = self.store.cast();
        other
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), PerformerError> {
        if ids.is_empty() {
            return Err(PerformerError::EmptySequence);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(PerformerError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(PerformerError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `[ids.len(), vocab]`.
    pub fn logits_var(&self, g: &mut Graph<'_, T>, ids: &[u32]) -> Result<Var, PerformerError> {
        self.check_ids(ids)?;
        let d = self.config.hidden;
        let table = g.param(self.embedding);
        let x = g.embedding(table, ids)?;
        let pos = Tensor::new(&[ids.len(), d], self.positions.data()[..ids.len() * d].to_vec())?;
        let pos = g.input(pos);
        let mut x = g.add(x, pos)?;
        x = g.dropout(x);
        for block in &self.blocks {
            x = block.forward(g, x, AttentionMask::Bidirectional, None)?;
        }
        x = self.norm.forward(g, x)?;
        Ok(g.matmul_t(x, table)?)
    }

    pub fn forward(&self, ids: &[u32]) -> Result<Tensor<T>, PerformerError> {
        let mut g = Graph::new(&self.store);
        let logits = self.logits_var(&mut g, ids)?;
        Ok(g.value(logits).clone())
    }

    pub fn loss(&self, example: &MaskedExample) -> Result<f64, PerformerError> {
        let mut g = Graph::new(&self.store);
        let logits = self.logits_var(&mut g, &example.input)?;
        let loss = g.cross_entropy(logits, &example.targets)?;
        Ok(g.value(loss).item().as_f64())
    }

    pub fn loss_and_grads(
        &self,
        example: &MaskedExample,
        dropout_rng: Option<ChaCha8Rng>,
    ) -> Result<(f64, Gradients<T>), PerformerError> {
        let mut g = Graph::new(&self.store);
        if let Some(rng) = dropout_rng {
            g = g.with_dropout(self.config.dropout, rng);
        }
        let logits = self.logits_var(&mut g, &example.input)?;
        let loss = g.cross_entropy(logits, &example.targets)?;
        let value = g.value(loss).item().as_f64();
        Ok((value, g.backward(loss)?.into_gradients()))
    }

    /// Renders performance tokens for a score.
    ///
    /// Missing velocity and microshift slots are inserted after each pitch;
    /// existing ones are re-predicted. All other tokens are copied verbatim.
    pub fn apply_performance(
        &self,
        tokens: &[Token],
        tokenizer: &Tokenizer,
        mode: DecodeMode,
    ) -> Result<Vec<Token>, PerformerError> {
        let vocab = tokenizer.vocab();
        if vocab.len() != self.config.vocab_size {
            return Err(PerformerError::VocabMismatch {
                expected: self.config.vocab_size,
                found: vocab.len(),
            });
        }
        let cfg = tokenizer.config();
        if !cfg.use_velocity && !cfg.use_microshift {
            return Err(PerformerError::NothingToPredict);
        }
        let (mut out, slots) = performance_slots(tokens, cfg)?;
        if slots.is_empty() {
            return Ok(out);
        }
        let ids = vocab.encode_ids(&out)?;
        let logits = self.forward(&ids)?;
        let mut rng = match mode {
            DecodeMode::Sample { seed, .. } => Some(stream(seed, &[STREAM_SAMPLE])),
            DecodeMode::Greedy => None,
        };
        for (position, kind) in slots {
            let range = vocab.range(kind);
            let allowed = |i: usize| range.contains(&(i as u32));
            let row = logits.row_slice(position);
            let id = match (mode, rng.as_mut()) {
                (DecodeMode::Sample { temperature, top_p, .. }, Some(rng)) if temperature > 1e-6 => {
                    sample_top_p(row, allowed, temperature, top_p, rng)
                }
                _ => argmax(row, allowed),
            }
            .expect("kind range is non-empty when the kind is enabled");
            out[position] = vocab.token(id as u32).expect("id within vocabulary");
        }
        Ok(out)
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

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, TokenizerConfig), PerformerError> {
        let kind = ckpt.config.get("kind").and_then(|k| k.as_str());
        if kind != Some(CHECKPOINT_KIND) {
            return Err(PerformerError::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {kind:?}"
            )));
        }
        let field = |name: &str| {
            ckpt.config
                .get(name)
                .cloned()
                .ok_or_else(|| PerformerError::Checkpoint(format!("config lacks `{name}`")))
        };
        let config: PerformerConfig =
            serde_json::from_value(field("model")?).map_err(|e| PerformerError::Checkpoint(e.to_string()))?;
        let tokenizer: TokenizerConfig =
            serde_json::from_value(field("tokenizer")?).map_err(|e| PerformerError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        ckpt.restore_params(&mut model.store)?;
        Ok((model, tokenizer))
    }
}

/// Lays out one MASK per performance slot, inserting slots a note lacks.
/// Returns the masked sequence and `(position, kind)` of every slot.
pub fn performance_slots(
    tokens: &[Token],
    config: &TokenizerConfig,
) -> Result<(Vec<Token>, Vec<(usize, TokenKind)>), PerformerError> {
    let mut out = Vec::with_capacity(tokens.len() + 2 * tokens.len() / 3);
    let mut slots = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let token = tokens[i];
        if token.is_performance() {
            return Err(PerformerError::StrayPerformanceToken {
                index: i,
                kind: token.kind(),
            });
        }
        out.push(token);
        i += 1;
        if let Token::Pitch(_) = token {
            while i < tokens.len() && tokens[i].is_performance() {
                i += 1;
            }
            for (enabled, kind) in [
                (config.use_velocity, TokenKind::Velocity),
                (config.use_microshift, TokenKind::MicroShift),
            ] {
                if enabled {
                    slots.push((out.len(), kind));
                    out.push(Token::Mask);
                }
            }
        }
    }
    Ok((out, slots))
}

pub struct PerformerTrainer {
    pub model: Performer<f32>,
    pub adam: Adam<f32>,
    pub train: TrainConfig,
    pub tokenizer: TokenizerConfig,
    pub seed: u64,
    examples: Vec<MaskedExample>,
}

impl PerformerTrainer {
    /// Examples without any performance token are skipped.
    pub fn new(
        config: PerformerConfig,
        tokenizer: TokenizerConfig,
        train: TrainConfig,
        examples: Vec<MaskedExample>,
        seed: u64,
    ) -> Result<Self, PerformerError> {
        let model = Performer::new(config, seed)?;
        Self::with_model(model, tokenizer, train, examples, seed)
    }

    fn with_model(
        model: Performer<f32>,
        tokenizer: TokenizerConfig,
        train: TrainConfig,
        examples: Vec<MaskedExample>,
        seed: u64,
    ) -> Result<Self, PerformerError> {
        let examples: Vec<_> = examples.into_iter().filter(|e| !e.targets.is_empty()).collect();
        if examples.is_empty() {
            return Err(PerformerError::EmptyCorpus);
        }
        for e in &examples {
            model.check_ids(&e.input)?;
        }
        if train.batch_size == 0 {
            return Err(PerformerError::Config("batch_size must be positive".into()));
        }
        let adam = Adam::new(train.adam, model.store());
        Ok(Self {
            model,
            adam,
            train,
            tokenizer,
            seed,
            examples,
        })
    }

    pub fn resume(ckpt: &Checkpoint, examples: Vec<MaskedExample>) -> Result<Self, PerformerError> {
        let (model, tokenizer) = Performer::from_checkpoint(ckpt)?;
        let training = ckpt.config.get("training").cloned().unwrap_or_default();
        let train: TrainConfig = training
            .get("train")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| PerformerError::Checkpoint(e.to_string()))?
            .unwrap_or_default();
        let seed = training.get("seed").and_then(|s| s.as_u64()).unwrap_or(0);
        let mut trainer = Self::with_model(model, tokenizer, train, examples, seed)?;
        let store = trainer.model.store.clone();
        ckpt.restore_adam(&store, &mut trainer.adam)?;
        Ok(trainer)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn step(&mut self) -> Result<StepRecord, PerformerError> {
        let step = self.adam.step;
        let batch = batch_indices(self.seed, self.examples.len(), step, self.train.batch_size);
        let mut grads = Gradients::empty(self.model.store.len());
        let mut total = 0.0;
        for (b, &idx) in batch.iter().enumerate() {
            let dropout = (self.model.config.dropout > 0.0)
                .then(|| stream(self.seed, &[STREAM_DROPOUT, step, b as u64]));
            let (loss, g) = self.model.loss_and_grads(&self.examples[idx], dropout)?;
            grads.accumulate(&g);
            total += loss;
        }
        let norm = apply_update(&mut self.model.store, &mut self.adam, grads, batch.len(), self.train.clip_norm);
        Ok(StepRecord {
            step: self.adam.step,
            loss: total / batch.len() as f64,
            recon: None,
            kl: None,
            beta: None,
            grad_norm: norm,
        })
    }

    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<(), PerformerError> {
        while self.adam.step < self.train.steps {
            let record = self.step()?;
            let s = record.step;
            if self.train.log_every > 0 && (s % self.train.log_every == 0 || s == self.train.steps) {
                observer.on_step(&record);
            }
            if self.train.checkpoint_every > 0 && s % self.train.checkpoint_every == 0 {
                observer
                    .on_checkpoint(s, &self.checkpoint())
                    .map_err(|e| PerformerError::Numerics(e.into()))?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let extra = json!({ "train": self.train, "seed": self.seed, "step": self.adam.step });
        self.model.to_checkpoint(&self.tokenizer, Some(&self.adam), extra)
    }
}

/// Trains a performer on fully expressive token sequences.
pub fn train_performer(
    corpus: &[Vec<Token>],
    config: PerformerConfig,
    tokenizer: &Tokenizer,
    train: TrainConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<PerformerTrainer, PerformerError> {
    let examples = corpus
        .iter()
        .map(|t| masked_example(t, tokenizer))
        .collect::<Result<Vec<_>, _>>()?;
    let mut trainer = PerformerTrainer::new(config, tokenizer.config().clone(), train, examples, seed)?;
    trainer.run(observer)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::{NoteEvent, Score};

    fn tokenizer() -> Tokenizer {
        Tokenizer::new(TokenizerConfig {
            pitch_min: 58,
            pitch_max: 66,
            max_timeshift_ticks: 32,
            ..TokenizerConfig::with_resolution(32)
        })
        .unwrap()
    }

    fn tiny(vocab: usize) -> PerformerConfig {
        PerformerConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            dropout: 0.0,
            max_seq_len: 40,
            vocab_size: vocab,
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::<f64>::zeros(&[3, 50]);
        let l = performer_loss(&logits, &[(0, 4), (2, 9)]);
        assert!((l - 50f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn slots_inserted_for_score_only_input() {
        let tok = tokenizer();
        let score = Score::new(32, vec![NoteEvent::new(60, 0, 8, 90), NoteEvent::new(62, 8, 8, 40)]);
        let full = tok.encode(&score).unwrap();
        let bare = crate::pertok::strip_performance(&full);
        let (a, sa) = performance_slots(&full, tok.config()).unwrap();
        let (b, sb) = performance_slots(&bare, tok.config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.len(), full.len());
        assert_eq!(sa.len(), 4);
    }

    #[test]
    fn stray_performance_token_rejected() {
        let tok = tokenizer();
        let v = tok.velocity_token(64);
        assert!(matches!(
            performance_slots(&[Token::Bos, v], tok.config()),
            Err(PerformerError::StrayPerformanceToken { index: 1, .. })
        ));
    }

    #[test]
    fn filled_slots_have_the_right_kind() {
        let tok = tokenizer();
        let m = Performer::<f32>::new(tiny(tok.vocab().len()), 3).unwrap();
        let score = Score::new(32, vec![NoteEvent::new(60, 0, 8, 90), NoteEvent::new(64, 16, 4, 20)]);
        let bare = crate::pertok::strip_performance(&tok.encode(&score).unwrap());
        let out = m.apply_performance(&bare, &tok, DecodeMode::Greedy).unwrap();
        assert_eq!(crate::pertok::strip_performance(&out), bare);
        let kinds: Vec<_> = out.iter().map(Token::kind).collect();
        let expected_after_pitch = [TokenKind::Velocity, TokenKind::MicroShift];
        for (i, k) in kinds.iter().enumerate() {
            if *k == TokenKind::Pitch {
                assert_eq!(&kinds[i + 1..i + 3], &expected_after_pitch);
            }
        }
        tok.decode(&out).unwrap();
    }

    #[test]
    fn vocab_mismatch_is_an_error() {
        let tok = tokenizer();
        let m = Performer::<f32>::new(tiny(tok.vocab().len() + 1), 3).unwrap();
        assert!(matches!(
            m.apply_performance(&[Token::Bos, Token::Eos], &tok, DecodeMode::Greedy),
            Err(PerformerError::VocabMismatch { .. })
        ));
    }
}
