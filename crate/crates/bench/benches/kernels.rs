use adapterlab_core::autograd::Tape;
use adapterlab_core::spectral::{effective_rank, svd_values};
use adapterlab_core::RngState;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = RngState::new(1, 1);
    for n in [16usize, 64, 128] {
        let a = rng.normal_tensor(&[n, n], 1.0);
        let b = rng.normal_tensor(&[n, n], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("svd_values");
    let mut rng = RngState::new(2, 1);
    for (rows, cols) in [(8usize, 5usize), (64, 16), (1024, 64)] {
        let m = rng.normal_tensor(&[rows, cols], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &m, |bench, m| {
            bench.iter(|| black_box(effective_rank(&svd_values(m).unwrap()).unwrap()))
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let mut rng = RngState::new(3, 1);
    let x = rng.normal_tensor(&[32, 64], 1.0);
    let w = rng.normal_tensor(&[64, 64], 0.1);
    c.bench_function("tape_mlp_backward_32x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let h = tape.matmul_t(xv, wv).unwrap();
            let a = tape.silu(h).unwrap();
            let loss = tape.mean(a).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

criterion_group!(benches, matmul, svd, backward);
criterion_main!(benches);
