use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tdunet::network::{backward, forward, Branches};
use tdunet::ops::Mode;
use tdunet::Tensor;
use tdunet_bench::{label, network_fixture, reference_count_table};

fn passes(c: &mut Criterion) {
    eprint!("{}", reference_count_table());
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    for branches in [Branches::HtOnly, Branches::HtDct] {
        for base in [4, 8] {
            let (mut model, x) = network_fixture(branches, base, 2, 4, 64);
            let id = format!("{}_b{base}", label(branches));
            group.bench_function(BenchmarkId::new("forward", &id), |b| {
                b.iter(|| forward(&mut model, black_box(&x), Mode::Train).unwrap())
            });
            let (probs, _) = forward(&mut model, &x, Mode::Train).unwrap();
            let grad = Tensor::full(probs.shape(), 1.0 / probs.len() as f32);
            group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
                b.iter(|| {
                    let (_, trace) = forward(&mut model, black_box(&x), Mode::Train).unwrap();
                    model.zero_grads();
                    backward(&mut model, &trace, &grad).unwrap();
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, passes);
criterion_main!(benches);
