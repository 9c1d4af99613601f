use criterion::{black_box, criterion_group, criterion_main, Criterion};
use dsmoe::attribution::prompt_importance;
use dsmoe::corpus::Prompt;
use dsmoe::model::{
    route_logits, train, LayerSteering, ModelConfig, MoeModel, RouterMode, TrainSettings,
};
use dsmoe::steering::ApplicationPoint;

fn tokens(n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|i| 2 + (i * 7919) % (vocab - 2)).collect()
}

fn forward(c: &mut Criterion) {
    let model = MoeModel::new(ModelConfig::default()).unwrap();
    let t = tokens(32, model.config().vocab_size);
    c.bench_function("forward_t32", |b| {
        b.iter(|| model.forward(black_box(&t), None).unwrap())
    });
}

fn routing(c: &mut Criterion) {
    let logits: Vec<f64> = (0..16)
        .map(|i| ((i * 37) % 16) as f64 * 0.3 - 2.0)
        .collect();
    let mut m = vec![1.0; 16];
    m[3] = 3.0;
    let mut g = c.benchmark_group("route_16_experts");
    for mode in [RouterMode::PreSoftmax, RouterMode::PostSoftmax] {
        g.bench_function(mode.as_str(), |b| {
            b.iter(|| route_logits(black_box(&logits), 2, mode, None).unwrap())
        });
    }
    let steer = LayerSteering {
        multipliers: &m,
        point: ApplicationPoint::GateWeights,
    };
    g.bench_function("steered", |b| {
        b.iter(|| route_logits(black_box(&logits), 2, RouterMode::PreSoftmax, Some(steer)).unwrap())
    });
    g.finish();
}

fn attribution(c: &mut Criterion) {
    let model = MoeModel::new(ModelConfig::default()).unwrap();
    let t = tokens(24, model.config().vocab_size);
    let prompt = Prompt {
        id: "bench",
        domain: "bench",
        tokens: &t,
    };
    c.bench_function("importance_t24", |b| {
        b.iter(|| prompt_importance(black_box(prompt), &model).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let base = MoeModel::new(ModelConfig::default()).unwrap();
    let corpus: Vec<Vec<usize>> = (0..8)
        .map(|i| tokens(20 + i, base.config().vocab_size))
        .collect();
    let settings = TrainSettings {
        steps: 1,
        ..TrainSettings::default()
    };
    c.bench_function("train_step_batch8", |b| {
        b.iter_batched(
            || base.clone(),
            |mut m| train(&mut m, &corpus, &settings).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, forward, routing, attribution, train_step);
criterion_main!(benches);
