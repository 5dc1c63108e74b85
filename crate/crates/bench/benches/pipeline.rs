use alnp3::eval::{bleu4, evaluate};
use alnp3::objective::{scene_objective, Item, LossWeights};
use alnp3::stack::forward;
use alnp3::train::{TrainConfig, Trainer};
use alnp3::world::{generate_scene, WorldConfig};
use alnp3::{ModelConfig, Session};
use alnp3_bench::{corpus, model, scene_data};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn world(c: &mut Criterion) {
    let w = WorldConfig::default();
    c.bench_function("generate_scene_4_agents", |b| {
        let mut seed = 0;
        b.iter(|| {
            seed += 1;
            black_box(generate_scene(seed, 4, &w).unwrap())
        })
    });
}

fn stack(c: &mut Criterion) {
    let mut group = c.benchmark_group("stack_forward");
    for n in [1usize, 4] {
        let m = model(n);
        let d = scene_data(&m, 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut s = Session::inference(&m.params);
                black_box(forward(&mut s, &m.cfg, &m.statics, &d, None).unwrap());
            })
        });
    }
    group.finish();
}

fn objective(c: &mut Criterion) {
    let m = model(4);
    let d = scene_data(&m, 5);
    let mut group = c.benchmark_group("scene_objective_backward");
    for (name, item) in [
        ("perception", Item::Perception(0)),
        ("prediction", Item::Prediction),
        ("planning", Item::Planning),
        ("qa", Item::Qa(0)),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut s = Session::new(&m.params);
                let obj =
                    scene_objective(&mut s, &m, &d, item, &LossWeights::default(), 0.07).unwrap();
                black_box(s.gradients(obj.total).unwrap());
            })
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let data = corpus(16, 4);
    let base = ModelConfig {
        n_agents: 4,
        ..ModelConfig::default()
    };
    let mut t = Trainer::new(&data, &base, TrainConfig::default()).unwrap();
    c.bench_function("train_step_batch4", |b| {
        b.iter(|| black_box(t.step().unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let m = model(4);
    let heldout = corpus(8, 4);
    let mut group = c.benchmark_group("metrics");
    group.sample_size(10);
    group.bench_function("evaluate_8_scenes", |b| {
        b.iter(|| black_box(evaluate(&m, &heldout).unwrap()))
    });
    let cands: Vec<Vec<u32>> = (0..200)
        .map(|i| (0..12).map(|k| (i * 7 + k * 3) % 50).collect())
        .collect();
    let refs: Vec<Vec<Vec<u32>>> = cands
        .iter()
        .map(|c| vec![c.iter().map(|t| (t + 1) % 50).collect()])
        .collect();
    group.bench_function("bleu4_200_sentences", |b| {
        b.iter(|| black_box(bleu4(&cands, &refs).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, world, stack, objective, training_step, metrics);
criterion_main!(benches);
