//! Acceptance criteria, one verdict line each. Exits non-zero on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cadenza_core::bench::{run_bench, standard_presets};
use cadenza_core::composer::{kl_free_bits, BetaSchedule, Composer, ComposerConfig, ComposerTrainer};
use cadenza_core::corpus::{synth_corpus, StyleSpec};
use cadenza_core::metrics::{
    attribute_vector, cosine_counts, cosine_similarity, expression_histograms, histogram_divergence, microtiming_bin,
    AttributeKind, ExpressionHistogram,
};
use cadenza_core::midi::{parse_midi, write_midi, NoteEvent, Score};
use cadenza_core::numerics::{gaussian_kl_term, AdamConfig, RotaryTable, Tensor};
use cadenza_core::performer::{performer_loss, train_performer, Performer, PerformerConfig};
use cadenza_core::pertok::{strip_performance, Token, TokenKind, Tokenizer, TokenizerConfig};
use cadenza_core::sampling::DecodeMode;
use cadenza_core::training::{Silent, TrainConfig};
use common::gradcheck::{composer_gradient_error, performer_gradient_error};
use common::{representable_score, round_trip_error, shift_set};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, budget: Duration) -> Verdict {
    ensure!(elapsed < budget, "took {elapsed:.1?}, budget {budget:?}");
    Ok(format!("{elapsed:.1?}"))
}

fn paper_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        grids: vec![120, 160],
        max_microshift_ticks: 30,
        microshift_buckets: 31,
        velocity_buckets: 32,
        ..TokenizerConfig::with_resolution(480)
    }
}

fn ac01_tokenizer_round_trip() -> Verdict {
    let start = Instant::now();
    let tok = Tokenizer::new(paper_tokenizer()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut onset, mut velocity, mut notes) = (0, 0, 0);
    for i in 0..1000 {
        let score = representable_score(&mut rng, 480, &[120, 160], 30, 4, 48);
        let err = round_trip_error(&tok, &score).map_err(|e| format!("score {i}: {e}"))?;
        ensure!(err.duration_mismatches == 0, "score {i}: {} durations not snapped", err.duration_mismatches);
        onset = onset.max(err.onset);
        velocity = velocity.max(err.velocity);
        notes += score.notes.len();
    }
    ensure!(onset <= 1, "max onset error {onset} ticks");
    ensure!(velocity <= 2, "max velocity error {velocity}");
    let t = within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("1000 scores, {notes} notes, max onset err {onset}, max velocity err {velocity}, {t}"))
}

fn ac02_table_structure() -> Verdict {
    let mut corpus = Vec::new();
    for (i, (vm, ms)) in [(90.0, 6.0), (50.0, -6.0), (75.0, 0.0)].into_iter().enumerate() {
        let spec = StyleSpec {
            velocity_mean: vm,
            velocity_std: 10.0,
            microshift_mean: ms,
            microshift_std: 3.0,
            density: 3.0 + i as f64,
            seed: i as u64,
            ..StyleSpec::default()
        };
        corpus.extend(synth_corpus(&spec, 60).map_err(|e| e.to_string())?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    corpus.extend((0..60).map(|_| representable_score(&mut rng, 480, &[120, 160], 30, 4, 40)));
    let presets = standard_presets(480);
    let rows = run_bench(&corpus, &presets).map_err(|e| e.to_string())?;
    let (base, fine, bare) = (&rows[0], &rows[1], &rows[2]);

    let total = |cfg: &TokenizerConfig| -> Result<usize, String> {
        let tok = Tokenizer::new(cfg.clone()).map_err(|e| e.to_string())?;
        corpus
            .iter()
            .map(|s| tok.encode(s).map(|t| t.len()).map_err(|e| e.to_string()))
            .sum()
    };
    let notes: usize = corpus.iter().map(|s| s.notes.len()).sum();
    let (t_base, t_bare) = (total(&presets[0].config)?, total(&presets[2].config)?);
    ensure!(t_bare == t_base - notes, "no-duration total {t_bare} != {t_base} - {notes}");
    ensure!(
        (bare.mean_length - (base.mean_length - base.mean_notes)).abs() < 1e-9,
        "mean identity off: {} vs {} - {}",
        bare.mean_length,
        base.mean_length,
        base.mean_notes
    );
    ensure!(bare.mean_length < base.mean_length, "no-duration not shorter");
    ensure!(base.mean_length <= fine.mean_length, "base longer than fine-microshift");

    for p in &presets {
        let tok = Tokenizer::new(p.config.clone()).map_err(|e| e.to_string())?;
        let v = tok.vocab();
        let kinds = [
            TokenKind::Pad,
            TokenKind::Bos,
            TokenKind::Eos,
            TokenKind::Mask,
            TokenKind::Pitch,
            TokenKind::TimeShift,
            TokenKind::Velocity,
            TokenKind::MicroShift,
            TokenKind::Duration,
        ];
        let per_kind: usize = kinds.iter().map(|&k| v.count(k)).sum();
        let c = &p.config;
        let shifts = shift_set(&c.grids, c.max_timeshift_ticks).len();
        let formula = usize::from(c.pitch_max - c.pitch_min) + 1
            + shifts
            + usize::from(c.use_velocity) * c.velocity_buckets as usize
            + usize::from(c.use_microshift) * c.microshift_buckets as usize
            + usize::from(c.use_duration) * shifts
            + 4;
        ensure!(per_kind == v.len() && formula == v.len(), "{}: {per_kind} / {formula} / {}", p.name, v.len());
    }
    Ok(format!(
        "{} files; lengths no-duration {:.2} < base {:.2} <= fine {:.2}; vocab {}/{}/{}",
        corpus.len(),
        bare.mean_length,
        base.mean_length,
        fine.mean_length,
        base.vocab_size,
        fine.vocab_size,
        bare.vocab_size
    ))
}

fn ac03_free_bits_values() -> Verdict {
    let zeros = vec![0.0f64; 128];
    let floor = kl_free_bits(&zeros, &zeros, 0.15);
    ensure!((floor - 19.2).abs() <= 1e-6, "floor case {floor}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mu: Vec<f64> = (0..128).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lv: Vec<f64> = (0..128).map(|_| rng.random_range(-2.0..2.0)).collect();
    let plain: f64 = mu.iter().zip(&lv).map(|(&m, &l)| gaussian_kl_term(m, l)).sum();
    let unfloored = kl_free_bits(&mu, &lv, 0.0);
    ensure!(unfloored.to_bits() == plain.to_bits(), "lambda 0: {unfloored} vs {plain}");
    let per_dim = kl_free_bits(&[1.0f64], &[0.0], 0.0);
    ensure!((per_dim - 0.5).abs() <= 1e-9, "per-dim {per_dim}");
    Ok(format!("floor {floor:.6}, unit-mean dim {per_dim}"))
}

fn ac04_gradients() -> Verdict {
    let start = Instant::now();
    let (c, p) = (composer_gradient_error(), performer_gradient_error());
    ensure!(c < 1e-5 && p < 1e-5, "relative errors composer {c:e}, performer {p:e}");
    let t = within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("relative error composer {c:.2e}, performer {p:.2e}, {t}"))
}

fn ac05_rotary_relative() -> Verdict {
    let table = RotaryTable::<f64>::new(32, 1024, 10_000.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q = Tensor::randn(&[1, 32], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 32], 1.0, &mut rng);
        let (m, n, s) = (rng.random_range(0..512), rng.random_range(0..512), rng.random_range(0..512));
        let score = |a: usize, b: usize| -> Result<f64, String> {
            let qa = table.apply_at(&q, &[a]).map_err(|e| e.to_string())?;
            let kb = table.apply_at(&k, &[b]).map_err(|e| e.to_string())?;
            Ok(qa.data().iter().zip(kb.data()).map(|(x, y)| x * y).sum())
        };
        worst = worst.max((score(m, n)? - score(m + s, n + s)?).abs());
    }
    ensure!(worst < 1e-5, "max deviation {worst:e}");
    Ok(format!("100 triples, max |delta q.k| {worst:.1e}"))
}

fn ac06_latent_sensitivity() -> Verdict {
    let config = ComposerConfig {
        layers: 2,
        heads: 4,
        hidden: 64,
        latent: 16,
        max_seq_len: 128,
        dropout: 0.0,
        ..ComposerConfig::desk(112)
    };
    let model = Composer::<f32>::new(config, 31).map_err(|e| e.to_string())?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let prev: Vec<u32> = (0..100).map(|_| rng.random_range(1..112)).collect();
    let z: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dz: Vec<f64> = (0..16).map(|_| if rng.random_bool(0.5) { 1e-3 } else { -1e-3 }).collect();
    let z2: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
    let a = model.decode_forward(&prev, &z).map_err(|e| e.to_string())?;
    let b = model.decode_forward(&prev, &z2).map_err(|e| e.to_string())?;
    let mut smallest = f64::INFINITY;
    for t in 0..prev.len() {
        let change: f64 = a.row_slice(t).iter().zip(b.row_slice(t)).map(|(x, y)| (x - y).abs()).sum();
        smallest = smallest.min(change);
    }
    ensure!(smallest > 0.0, "some position ignores z");
    Ok(format!("{}/{} positions respond, min |d logits| {smallest:.2e}", prev.len(), prev.len()))
}

/// Ten score-only training sequences shared by the composer criteria.
struct ComposerFixture {
    tokenizer: Tokenizer,
    scores: Vec<Score>,
    ids: Vec<Vec<u32>>,
}

const COMPOSER_SEED: u64 = 1;
const COMPOSER_STEPS: u64 = 600;

fn composer_fixture() -> Result<ComposerFixture, String> {
    let spec = StyleSpec {
        density: 3.0,
        pitches: vec![60, 62, 64, 65, 67, 69, 71, 72],
        seed: 7,
        ..StyleSpec::default()
    };
    let scores = synth_corpus(&spec, 10).map_err(|e| e.to_string())?;
    let tokenizer = Tokenizer::new(TokenizerConfig {
        grids: vec![120],
        pitch_min: 60,
        pitch_max: 72,
        ..TokenizerConfig::with_resolution(480)
    })
    .map_err(|e| e.to_string())?;
    let ids = scores
        .iter()
        .map(|s| {
            let t = strip_performance(&tokenizer.encode(s).map_err(|e| e.to_string())?);
            tokenizer.vocab().encode_ids(&t).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    Ok(ComposerFixture { tokenizer, scores, ids })
}

fn train_fixture(fx: &ComposerFixture, beta: f64) -> Result<Composer<f32>, String> {
    let config = ComposerConfig {
        layers: 2,
        heads: 4,
        hidden: 64,
        latent: 16,
        max_seq_len: 64,
        dropout: 0.0,
        free_bits: 0.15,
        beta: BetaSchedule::constant(beta),
        ..ComposerConfig::desk(fx.tokenizer.vocab().len())
    };
    let train = TrainConfig {
        steps: COMPOSER_STEPS,
        batch_size: 10,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        clip_norm: 1.0,
        checkpoint_every: 0,
        log_every: 0,
    };
    let mut trainer = ComposerTrainer::new(config, fx.tokenizer.config().clone(), train, fx.ids.clone(), COMPOSER_SEED)
        .map_err(|e| e.to_string())?;
    trainer.run(&mut Silent).map_err(|e| e.to_string())?;
    Ok(trainer.model)
}

/// Greedy reconstructions from the posterior mean.
fn reconstructions(model: &Composer<f32>, fx: &ComposerFixture) -> Result<Vec<Vec<Token>>, String> {
    fx.ids
        .iter()
        .map(|ids| {
            let (mu, _) = model.posterior(ids).map_err(|e| e.to_string())?;
            model.generate(&mu, &fx.tokenizer, DecodeMode::Greedy, 64).map_err(|e| e.to_string())
        })
        .collect()
}

fn mean_pitch_similarity(model: &Composer<f32>, fx: &ComposerFixture) -> Result<f64, String> {
    let mut total = 0.0;
    for (tokens, source) in reconstructions(model, fx)?.iter().zip(&fx.scores) {
        let decoded = fx.tokenizer.decode(tokens).map_err(|e| e.to_string())?;
        let a = attribute_vector(&decoded, AttributeKind::Pitch);
        let b = attribute_vector(source, AttributeKind::Pitch);
        total += cosine_similarity(&a, &b).unwrap_or(0.0);
    }
    Ok(total / fx.scores.len() as f64)
}

fn ac07_composer_overfit(fx: &ComposerFixture, model: &Composer<f32>, elapsed: Duration) -> Verdict {
    let (mut hits, mut total) = (0, 0);
    for ids in &fx.ids {
        let (h, n) = model.reconstruction_hits(ids).map_err(|e| e.to_string())?;
        hits += h;
        total += n;
    }
    let accuracy = hits as f64 / total as f64;
    let exact = reconstructions(model, fx)?
        .iter()
        .zip(&fx.ids)
        .filter(|(tokens, ids)| fx.tokenizer.vocab().encode_ids(tokens).ok().as_ref() == Some(*ids))
        .count();
    ensure!(accuracy >= 0.95, "teacher-forced accuracy {accuracy:.3}");
    ensure!(exact >= 8, "greedy reconstructions {exact}/10");
    let t = within(elapsed, Duration::from_secs(300))?;
    Ok(format!("accuracy {:.1}%, exact reconstructions {exact}/10, {COMPOSER_STEPS} steps in {t}", 100.0 * accuracy))
}

fn ac08_beta_ordering(fx: &ComposerFixture, unregularized: &Composer<f32>) -> Verdict {
    let mut sims = vec![(0.0, mean_pitch_similarity(unregularized, fx)?)];
    for beta in [0.3, 1.0] {
        let model = train_fixture(fx, beta)?;
        sims.push((beta, mean_pitch_similarity(&model, fx)?));
    }
    let listing = sims.iter().map(|(b, s)| format!("beta {b}: {s:.2}")).collect::<Vec<_>>().join(", ");
    ensure!(sims.windows(2).all(|w| w[1].1 <= w[0].1), "not non-increasing: {listing}");
    Ok(format!("seed {COMPOSER_SEED}, {listing}"))
}

fn ac09_performer_exclusivity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let logits = Tensor::<f64>::randn(&[30, 50], 2.0, &mut rng);
        let targets: Vec<(usize, u32)> = (0..30).filter(|r| r % 3 == 1).map(|r| (r, rng.random_range(0..50))).collect();
        let mut other = logits.clone();
        for r in (0..30).filter(|r| r % 3 != 1) {
            for c in 0..50 {
                other.data_mut()[r * 50 + c] = rng.random_range(-30.0..30.0);
            }
        }
        let (a, b) = (performer_loss(&logits, &targets), performer_loss(&other, &targets));
        ensure!(a.to_bits() == b.to_bits(), "loss moved: {a} vs {b}");
    }

    let tok = Tokenizer::new(paper_tokenizer()).map_err(|e| e.to_string())?;
    let config = PerformerConfig {
        layers: 2,
        heads: 2,
        hidden: 32,
        dropout: 0.0,
        max_seq_len: 320,
        vocab_size: tok.vocab().len(),
    };
    let model = Performer::<f32>::new(config, 3).map_err(|e| e.to_string())?;
    for i in 0..1000 {
        let score = representable_score(&mut rng, 480, &[120, 160], 30, 4, 48);
        let mut tokens = tok.encode(&score).map_err(|e| e.to_string())?;
        if i % 2 == 0 {
            tokens = strip_performance(&tokens);
        }
        let mode = if i % 4 < 2 {
            DecodeMode::Greedy
        } else {
            DecodeMode::Sample {
                temperature: 1.0,
                top_p: 0.9,
                seed: i,
            }
        };
        let out = model.apply_performance(&tokens, &tok, mode).map_err(|e| e.to_string())?;
        ensure!(strip_performance(&out) == strip_performance(&tokens), "input {i}: composition changed");
    }
    Ok("loss untouched by 100 untargeted perturbations; 1000/1000 compositions preserved".into())
}

fn ac10_performer_fidelity() -> Verdict {
    let start = Instant::now();
    let pitches: Vec<u8> = (60..=72).collect();
    let style_a = StyleSpec {
        velocity_mean: 100.0,
        velocity_std: 5.0,
        microshift_mean: 8.0,
        microshift_std: 3.0,
        density: 3.0,
        pitches,
        seed: 1,
        ..StyleSpec::default()
    };
    let style_b = StyleSpec {
        velocity_mean: 60.0,
        velocity_std: 15.0,
        microshift_mean: -8.0,
        seed: 2,
        ..style_a.clone()
    };
    let neutral = StyleSpec {
        velocity_mean: 80.0,
        velocity_std: 0.0,
        microshift_mean: 0.0,
        microshift_std: 0.0,
        seed: 3,
        ..style_a.clone()
    };
    let tok = Tokenizer::new(TokenizerConfig {
        grids: vec![120],
        pitch_min: 60,
        pitch_max: 72,
        ..paper_tokenizer()
    })
    .map_err(|e| e.to_string())?;
    let eval = synth_corpus(&neutral, 100).map_err(|e| e.to_string())?;
    let mut data = Vec::new();
    let mut predicted = Vec::new();
    for spec in [&style_a, &style_b] {
        let scores = synth_corpus(spec, 1000).map_err(|e| e.to_string())?;
        let mut hist = ExpressionHistogram::zeros();
        scores.iter().for_each(|s| hist.add(&expression_histograms(s)));
        data.push(hist);
        let seqs = scores
            .iter()
            .map(|s| tok.encode(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let config = PerformerConfig {
            dropout: 0.0,
            max_seq_len: 80,
            ..PerformerConfig::desk(tok.vocab().len())
        };
        let train = TrainConfig {
            steps: 600,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            clip_norm: 1.0,
            checkpoint_every: 0,
            log_every: 0,
        };
        let trainer = train_performer(&seqs, config, &tok, train, 5, &mut Silent).map_err(|e| e.to_string())?;
        let mut hist = ExpressionHistogram::zeros();
        for s in &eval {
            let score_only = strip_performance(&tok.encode(s).map_err(|e| e.to_string())?);
            let out = trainer
                .model
                .apply_performance(&score_only, &tok, DecodeMode::Greedy)
                .map_err(|e| e.to_string())?;
            hist.add(&expression_histograms(&tok.decode(&out).map_err(|e| e.to_string())?));
        }
        predicted.push(hist);
    }
    let kl = |p: &[u64], q: &[u64]| histogram_divergence(p, q).map(|d| d.kl).map_err(|e| e.to_string());
    let mut lines = Vec::new();
    let mut wins = 0;
    for (m, name) in [(0usize, "A"), (1, "B")] {
        let other = 1 - m;
        let v_own = kl(&predicted[m].velocity, &data[m].velocity)?;
        let v_opp = kl(&predicted[m].velocity, &data[other].velocity)?;
        let t_own = kl(&predicted[m].microtiming, &data[m].microtiming)?;
        let t_opp = kl(&predicted[m].microtiming, &data[other].microtiming)?;
        wins += usize::from(v_own < v_opp) + usize::from(t_own < t_opp);
        lines.push(format!("{name}: vel {v_own:.2}<{v_opp:.2}, micro {t_own:.2}<{t_opp:.2}"));
    }
    ensure!(wins == 4, "{wins}/4 comparisons: {}", lines.join("; "));
    let t = within(start.elapsed(), Duration::from_secs(1800))?;
    Ok(format!("4/4 ({}), {t}", lines.join("; ")))
}

fn ac11_metrics() -> Verdict {
    let a = [0u64, 3, 5, 0, 1];
    ensure!(cosine_counts(&a, &a).map_err(|e| e.to_string())? == 100.0, "self-similarity");
    ensure!(cosine_counts(&[1, 2, 0, 0], &[0, 0, 7, 1]).map_err(|e| e.to_string())? == 0.0, "orthogonal");
    let fixture = cosine_counts(&[2, 1, 0], &[1, 1, 0]).map_err(|e| e.to_string())?;
    let reference = 300.0 / 10f64.sqrt();
    ensure!((fixture - reference).abs() < 1e-3, "fixture {fixture}");
    let p: Vec<u64> = (0..100).map(|i| (i * 7 % 13) as u64).collect();
    let d = histogram_divergence(&p, &p).map_err(|e| e.to_string())?;
    ensure!(d.kl.abs() < 1e-9, "KL(p, p) = {}", d.kl);
    let bin = microtiming_bin(480 + 15, 480);
    ensure!(bin == 62, "+15 ticks lands in bin {bin}");
    Ok(format!("fixture {fixture:.6}, KL(p,p) {:.1e}, +15 ticks -> bin {bin} (+12%)", d.kl))
}

fn ac12_midi_robustness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut parsed = 0;
    for i in 0..100_000 {
        let len = rng.random_range(0..96);
        let mut bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        if i % 2 == 0 {
            // valid header prefix so the track parser sees random event data
            let mut head = b"MThd\0\0\0\x06\0\0\0\x01\x01\xe0MTrk".to_vec();
            head.extend_from_slice(&(len as u32).to_be_bytes());
            head.append(&mut bytes);
            bytes = head;
        }
        if parse_midi(&bytes).is_ok() {
            parsed += 1;
        }
    }
    for i in 0..1000 {
        let notes = (0..rng.random_range(0..40))
            .map(|_| {
                NoteEvent::new(
                    rng.random_range(0..128),
                    rng.random_range(0..8000),
                    rng.random_range(1..2000),
                    rng.random_range(1..128),
                )
            })
            .collect();
        let score = Score::new(480, notes);
        let bytes = write_midi(&score);
        let back = parse_midi(&bytes).map_err(|e| format!("score {i}: {e}"))?;
        ensure!(back == score, "score {i} changed on round trip");
        ensure!(write_midi(&back) == bytes, "score {i} bytes unstable");
    }
    Ok(format!("100000 fuzz inputs without a crash ({parsed} parsed), 1000 stable round trips"))
}

fn run(id: &str, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match &outcome {
        Ok(detail) => println!("[PASS] {id} {title}: {detail}"),
        Err(detail) => println!("[FAIL] {id} {title}: {detail}"),
    }
    outcome.is_ok()
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let mut ok = true;
    ok &= run("AC01", "tokenizer round trip", ac01_tokenizer_round_trip);
    ok &= run("AC02", "vocabulary and length accounting", ac02_table_structure);
    ok &= run("AC03", "free-bits KL values", ac03_free_bits_values);
    ok &= run("AC04", "gradient fidelity", ac04_gradients);
    ok &= run("AC05", "rotary relative positions", ac05_rotary_relative);
    ok &= run("AC06", "latent reaches every position", ac06_latent_sensitivity);

    let fixture = composer_fixture();
    let start = Instant::now();
    let base = fixture.as_ref().map_err(Clone::clone).and_then(|fx| train_fixture(fx, 0.0));
    let elapsed = start.elapsed();
    let both = |f: &dyn Fn(&ComposerFixture, &Composer<f32>) -> Verdict| -> Verdict {
        match (&fixture, &base) {
            (Ok(fx), Ok(m)) => f(fx, m),
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        }
    };
    ok &= run("AC07", "composer overfit", || both(&|fx, m| ac07_composer_overfit(fx, m, elapsed)));
    ok &= run("AC08", "KL weight ordering", || both(&ac08_beta_ordering));

    ok &= run("AC09", "performer exclusivity and mixing", ac09_performer_exclusivity);
    ok &= run("AC10", "performer style fidelity", ac10_performer_fidelity);
    ok &= run("AC11", "metrics fixtures", ac11_metrics);
    ok &= run("AC12", "MIDI robustness", ac12_midi_robustness);
    if !ok {
        std::process::exit(1);
    }
}
