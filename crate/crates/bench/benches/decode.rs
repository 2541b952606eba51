use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kvpsn_bench::Fixture;
use kvpsn_core::engine::{
    decode, decode_speculative_greedy_with, DecodeConfig, Drafting, ForcedAccept, TopK,
};
use kvpsn_core::model::vocab;

fn greedy(c: &mut Criterion) {
    let fx = Fixture::load(4).expect("fixture");
    let mut group = c.benchmark_group("greedy");
    group.sample_size(10);
    for (name, drafting, k) in [
        ("base", Drafting::None, TopK::Finite(1)),
        ("kvpsn-top1", Drafting::Kvpsn, TopK::Finite(1)),
        ("kvpsn-top-inf", Drafting::Kvpsn, TopK::Infinite),
        ("medusa-top1", Drafting::Medusa, TopK::Finite(1)),
    ] {
        let cfg = DecodeConfig {
            drafting,
            k,
            max_new_tokens: 32,
            ignore_eos: true,
            ..Default::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| {
                for (ex, enc) in fx.examples.iter().zip(&fx.encoded) {
                    decode(&fx.model, ex.prompt(), enc, &cfg).unwrap();
                }
            })
        });
    }
    let cfg = DecodeConfig {
        max_new_tokens: 32,
        ignore_eos: true,
        ..Default::default()
    };
    let forced = ForcedAccept { units: 3 };
    group.bench_function("forced-accept", |b| {
        b.iter(|| {
            for (ex, enc) in fx.examples.iter().zip(&fx.encoded) {
                decode_speculative_greedy_with(&fx.model, &forced, ex.prompt(), enc, &cfg).unwrap();
            }
        })
    });
    group.finish();
}

fn decoder_pass(c: &mut Criterion) {
    let fx = Fixture::load(1).expect("fixture");
    let mut group = c.benchmark_group("decoder_forward");
    let prompt = vocab::build_prompt(0).unwrap();
    let mut primed = fx.model.new_cache(&fx.encoded[0]).unwrap();
    fx.model.decoder_forward(&prompt, &mut primed).unwrap();
    let next = [vocab::content_token(3), vocab::content_token(4)];
    for p in [1usize, 2] {
        group.bench_with_input(BenchmarkId::from_parameter(p), &p, |b, &p| {
            b.iter(|| {
                let mut cache = primed.clone();
                fx.model.decoder_forward(&next[..p], &mut cache).unwrap()
            })
        });
    }
    let cross = fx.model.kvpsn_cross(&fx.encoded[0]).unwrap();
    group.bench_function("kvpsn-draft", |b| {
        b.iter(|| {
            fx.model
                .kvpsn_forward(next[0], primed.len(), &primed, &cross)
                .unwrap()
        })
    });
    group.finish();
}

fn beam(c: &mut Criterion) {
    let fx = Fixture::load(2).expect("fixture");
    let mut group = c.benchmark_group("beam3");
    group.sample_size(10);
    for (name, drafting) in [("base", Drafting::None), ("kvpsn-top1", Drafting::Kvpsn)] {
        let cfg = DecodeConfig {
            mode: kvpsn_core::engine::Mode::Beam,
            drafting,
            max_new_tokens: 24,
            ..Default::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| {
                for (ex, enc) in fx.examples.iter().zip(&fx.encoded) {
                    decode(&fx.model, ex.prompt(), enc, &cfg).unwrap();
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, greedy, decoder_pass, beam);
criterion_main!(benches);
