use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fmgp_bench::fixture;
use fmgp_core::GpModel;

fn gram_accumulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("gram_accumulation");
    group.sample_size(10);
    for n in [1_000usize, 10_000] {
        let fx = fixture(n, 64, 1, 7).expect("fixture");
        group.bench_with_input(BenchmarkId::from_parameter(n), &fx, |b, fx| {
            b.iter(|| fx.model.kernel().accumulate(&fx.x_train, Some(&fx.y_train)).expect("accumulate"))
        });
    }
    group.finish();
}

fn build(c: &mut Criterion) {
    let fx = fixture(5_000, 64, 1, 11).expect("fixture");
    let mut group = c.benchmark_group("build");
    group.sample_size(10);
    group.bench_function("n5000_p64", |b| {
        b.iter(|| GpModel::build(fx.model.kernel().clone(), 1.0, 0.1, &fx.x_train, &fx.y_train).expect("build"))
    });
    group.finish();
}

/// Prediction cost should not depend on the training-set size.
fn predict(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict_1000");
    for n in [1_000usize, 20_000] {
        let fx = fixture(n, 64, 1_000, 13).expect("fixture");
        group.bench_with_input(BenchmarkId::new("n_train", n), &fx, |b, fx| {
            b.iter(|| fx.model.predict(&fx.x_query).expect("predict"))
        });
    }
    group.finish();
}

criterion_group!(benches, gram_accumulation, build, predict);
criterion_main!(benches);
