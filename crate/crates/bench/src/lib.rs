//! Shared fixtures and benchmark groups for `cargo bench -p cadenza-bench`.

use std::hint::black_box;

use cadenza_core::composer::standard_normal;
use cadenza_core::corpus::{synth_corpus, StyleSpec};
use cadenza_core::midi::{parse_midi, write_midi};
use cadenza_core::numerics::rng::stream;
use cadenza_core::performer::masked_example;
use cadenza_core::pertok::strip_performance;
use cadenza_core::{Composer, ComposerConfig, Performer, PerformerConfig, Score, Tokenizer, TokenizerConfig};
use criterion::{BenchmarkId, Criterion, Throughput};

/// Four-bar excerpts at `density` notes per bar with moderate expression.
pub fn corpus(density: f64, n: usize) -> Vec<Score> {
    let spec = StyleSpec {
        velocity_std: 12.0,
        microshift_std: 6.0,
        density,
        pitches: (48..=84).collect(),
        seed: 42,
        ..StyleSpec::default()
    };
    synth_corpus(&spec, n).expect("valid style")
}

pub fn tokenizer() -> Tokenizer {
    Tokenizer::new(TokenizerConfig {
        grids: vec![120, 160],
        ..TokenizerConfig::with_resolution(480)
    })
    .expect("valid tokenizer")
}

pub fn tokenizer_benches(c: &mut Criterion) {
    let tok = tokenizer();
    let mut group = c.benchmark_group("pertok");
    for density in [2.0, 8.0, 16.0] {
        let score = &corpus(density, 1)[0];
        let tokens = tok.encode(score).expect("encodable");
        group.throughput(Throughput::Elements(score.notes.len() as u64));
        group.bench_with_input(BenchmarkId::new("encode", density), score, |b, s| {
            b.iter(|| tok.encode(black_box(s)).expect("encodable"))
        });
        group.bench_with_input(BenchmarkId::new("decode", density), &tokens, |b, t| {
            b.iter(|| tok.decode(black_box(t)).expect("decodable"))
        });
    }
    group.finish();
}

pub fn midi_benches(c: &mut Criterion) {
    let mut group = c.benchmark_group("midi");
    for density in [2.0, 16.0] {
        let score = &corpus(density, 1)[0];
        let bytes = write_midi(score);
        group.throughput(Throughput::Bytes(bytes.len() as u64));
        group.bench_with_input(BenchmarkId::new("parse", density), &bytes, |b, bytes| {
            b.iter(|| parse_midi(black_box(bytes)).expect("valid file"))
        });
        group.bench_with_input(BenchmarkId::new("write", density), score, |b, s| b.iter(|| write_midi(black_box(s))));
    }
    group.finish();
}

pub fn model_benches(c: &mut Criterion) {
    let tok = tokenizer();
    let score = &corpus(4.0, 1)[0];
    let tokens = tok.encode(score).expect("encodable");
    let vocab = tok.vocab().len();

    let composer = Composer::<f32>::new(ComposerConfig::desk(vocab), 1).expect("valid config");
    let ids = tok.vocab().encode_ids(&strip_performance(&tokens)).expect("in vocabulary");
    let eps: Vec<f32> = standard_normal(composer.config().latent, &mut stream(1, &[]));
    let (z, _) = composer.posterior(&ids).expect("encodable");

    let performer = Performer::<f32>::new(PerformerConfig::desk(vocab), 1).expect("valid config");
    let example = masked_example(&tokens, &tok).expect("maskable");

    let mut group = c.benchmark_group("models");
    group.sample_size(20);
    group.bench_function("composer/decode_forward", |b| {
        b.iter(|| composer.decode_forward(black_box(&ids[..ids.len() - 1]), &z).expect("forward"))
    });
    group.bench_function("composer/loss_and_grads", |b| {
        b.iter(|| composer.loss_and_grads(black_box(&ids), &eps, 1.0, None).expect("backward"))
    });
    group.bench_function("performer/forward", |b| {
        b.iter(|| performer.forward(black_box(&example.input)).expect("forward"))
    });
    group.bench_function("performer/loss_and_grads", |b| {
        b.iter(|| performer.loss_and_grads(black_box(&example), None).expect("backward"))
    });
    group.finish();
}
