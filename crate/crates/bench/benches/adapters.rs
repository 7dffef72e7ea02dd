use adapterlab_core::adapters::{cera_forward, init_adapter, lora_forward, AdapterConfig};
use adapterlab_core::rng::streams;
use adapterlab_core::tasks::{teacher_task, TeacherTaskParams};
use adapterlab_core::train::{train_adapter, TrainData};
use adapterlab_core::{Batch, Mode, Model, ModelConfig, RngState, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn layer_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("layer_forward");
    let mut rng = RngState::new(1, 1);
    let w0 = rng.normal_tensor(&[64, 64], 0.1);
    let x = rng.normal_tensor(&[256, 64], 1.0);
    for r in [4usize, 16, 64] {
        let lora = AdapterConfig::lora(r);
        let cera = AdapterConfig::cera(r);
        let mut st = init_adapter(&lora, 64, 64, &mut rng).unwrap();
        st.w_down = rng.normal_tensor(&[64, r], 0.1);
        group.bench_with_input(BenchmarkId::new("lora", r), &r, |b, _| {
            b.iter(|| black_box(lora_forward(&x, &w0, &st, &lora).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("cera", r), &r, |b, _| {
            let mut drop_rng = RngState::new(1, streams::DROPOUT);
            b.iter(|| black_box(cera_forward(&x, &w0, &st, &cera, Mode::Eval, &mut drop_rng).unwrap()))
        });
    }
    group.finish();
}

fn model_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("desk_model_forward");
    let mut rng = RngState::new(2, streams::PROBE);
    let seqs: Vec<Vec<usize>> = (0..8).map(|_| (0..48).map(|_| rng.index(12)).collect()).collect();
    let base = Model::build(&ModelConfig::desk(), 1).unwrap();
    let variants = [
        ("backbone", None),
        ("lora16", Some(AdapterConfig::lora(16))),
        ("cera16", Some(AdapterConfig::cera(16))),
    ];
    for (name, cfg) in variants {
        let mut m = base.clone();
        if let Some(cfg) = cfg {
            m.inject_all(&cfg, &mut RngState::new(1, streams::ADAPTER_BASE)).unwrap();
        }
        group.bench_function(name, |b| {
            let mut eval_rng = RngState::new(0, 0);
            b.iter(|| black_box(m.forward(Batch::Tokens(&seqs), Mode::Eval, &mut eval_rng).unwrap()))
        });
    }
    group.finish();
}

fn training_steps(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_20_steps");
    group.sample_size(10);
    let cfg = ModelConfig::regressor();
    let base = Model::build(&cfg, 1).unwrap();
    let params = TeacherTaskParams {
        n_train: 512,
        n_test: 128,
        ..TeacherTaskParams::default()
    };
    let ds = teacher_task(&base, &params, 1).unwrap();
    let train = TrainConfig {
        steps: 20,
        ..TrainConfig::default()
    };
    for (name, adapter) in [("lora16", AdapterConfig::lora(16)), ("cera16", AdapterConfig::cera(16))] {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut m = base.clone();
                m.inject_all(&adapter, &mut RngState::new(1, streams::ADAPTER_BASE)).unwrap();
                black_box(train_adapter(&mut m, TrainData::Regression(&ds), &train).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, layer_forward, model_forward, training_steps);
criterion_main!(benches);
