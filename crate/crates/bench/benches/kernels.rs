use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use dms_bench::{random_tensor, random_vec, rng};
use dms_core::baselines::{quest_select, PageMeta};
use dms_core::kvcache::ModelRunner;
use dms_core::kvcache::{DecisionSource, DelayedEviction};
use dms_core::numerics::{matmul, Tape};
use dms_core::train::{ForwardOptions, GateMode, GateUse, ModelConfig, ToyModel, EvictionTiming};

fn small_model() -> ToyModel {
    let cfg = ModelConfig {
        max_seq: 64,
        ..ModelConfig::default()
    };
    ToyModel::new(cfg, GateMode::Vector, &mut rng("model")).unwrap()
}

fn kernels(c: &mut Criterion) {
    let mut r = rng("matmul");
    let a = random_tensor(&mut r, 64, 64);
    let b = random_tensor(&mut r, 64, 256);
    c.bench_function("matmul_64x64x256", |bch| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));

    let model = small_model();
    let tokens: Vec<usize> = (0..64).map(|i| (i * 37) % 256).collect();
    let noise: Vec<_> = (0..2).map(|_| random_tensor(&mut r, 64, 2)).collect();
    c.bench_function("tape_forward_backward_t64", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let opts = ForwardOptions::with_gate(GateUse::Sampled {
                noise: noise.clone(),
                window: 16,
                timing: EvictionTiming::Delayed,
            });
            let out = model.forward(&mut tape, &vars, &tokens, &opts).unwrap();
            let loss = tape.mean(out.logits);
            black_box(tape.backward(loss).unwrap());
        })
    });

    c.bench_function("decode_step_after_48_tokens", |bch| {
        bch.iter_batched(
            || {
                let mut runner =
                    ModelRunner::new(&model, Box::new(DelayedEviction { window: 16 }), 16, DecisionSource::Learned)
                        .unwrap();
                runner.prefill(&tokens[..48]).unwrap();
                runner
            },
            |mut runner| black_box(runner.step(7).unwrap()),
            BatchSize::SmallInput,
        )
    });

    let metas: Vec<PageMeta> = (0..128)
        .map(|_| {
            let keys: Vec<Vec<f64>> = (0..16).map(|_| random_vec(&mut r, 32)).collect();
            PageMeta::from_keys(32, keys.iter().map(Vec::as_slice))
        })
        .collect();
    let q = random_vec(&mut r, 32);
    c.bench_function("quest_select_128_pages_top8", |bch| bch.iter(|| quest_select(black_box(&q), &metas, 8)));
}

criterion_group!(benches, kernels);
criterion_main!(benches);
