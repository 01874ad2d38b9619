use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treegate::agreement::{build_dataset, Setting, SettingSpec};
use treegate::autodiff::Graph;
use treegate::encoder::IGNORE_INDEX;
use treegate::constituent::{compose_layers, constituent_prior};
use treegate::grammar::{Grammar, SampleOptions, Sampler};
use treegate::tree::extract;
use treegate_bench::{desk_model, sentence_batch};

fn encoder(c: &mut Criterion) {
    let grammar = Grammar::builtin();
    let mut group = c.benchmark_group("encoder");
    group.sample_size(10);
    for gated in [true, false] {
        let model = desk_model(&grammar, gated);
        let batch = sentence_batch(&model, &grammar, 16);
        let targets: Vec<usize> = (0..batch.size).map(|i| i % 2).collect();
        let name = if gated { "tree" } else { "plain" };
        group.bench_function(format!("train_step_{name}"), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true);
                let out = model.forward(&mut g, &p, &batch, None).unwrap();
                let logits = model.classify(&mut g, &p, out.hidden).unwrap();
                let loss = g.cross_entropy(logits, &targets, IGNORE_INDEX).unwrap();
                g.backward(loss).unwrap();
                black_box(p.grads(&g))
            })
        });
        group.bench_function(format!("infer_{name}"), |b| b.iter(|| black_box(model.infer(&batch).unwrap())));
    }
    group.finish();
}

fn random_ladder(n: usize, layers: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut ladder: Vec<Vec<f64>> = Vec::with_capacity(layers);
    for _ in 0..layers {
        let fresh: Vec<f64> = (0..n - 1).map(|_| rng.random::<f64>()).collect();
        let next = match ladder.last() {
            Some(prev) => compose_layers(&fresh, prev),
            None => fresh,
        };
        ladder.push(next);
    }
    ladder
}

fn trees(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ladder = random_ladder(64, 4, &mut rng);
    c.bench_function("tree/extract_64", |b| b.iter(|| black_box(extract(&ladder, 0.8).unwrap())));
    c.bench_function("constituent/prior_64", |b| b.iter(|| black_box(constituent_prior(&ladder[3]))));
}

fn data(c: &mut Criterion) {
    let grammar = Grammar::builtin();
    let sampler = Sampler::new(&grammar, SampleOptions::default()).unwrap();
    c.bench_function("grammar/sample_100", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(5),
            |mut rng| {
                for _ in 0..100 {
                    black_box(sampler.sample(&mut rng).unwrap());
                }
            },
            BatchSize::SmallInput,
        )
    });
    let spec = SettingSpec::with_sizes(Setting::Gen, &grammar, (200, 60, 60)).unwrap();
    let mut group = c.benchmark_group("agreement");
    group.sample_size(10);
    group.bench_function("build_gen_320", |b| b.iter(|| black_box(build_dataset(&grammar, &spec, 9).unwrap())));
    group.finish();
}

criterion_group!(benches, encoder, trees, data);
criterion_main!(benches);
