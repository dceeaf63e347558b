use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tdunet::ops::{conv2d_backward, conv2d_forward, ConvParams};
use tdunet::transforms::{dct2d, fwht_1d, hadamard_matrix, ht2d};
use tdunet::Tensor;
use tdunet_bench::{naive_transform, random_vec, rng};

fn transforms(c: &mut Criterion) {
    let mut group = c.benchmark_group("transform_1d");
    for n in [32, 128] {
        let v = random_vec(n);
        let h = hadamard_matrix(n).unwrap();
        group.bench_with_input(BenchmarkId::new("fwht", n), &v, |b, v| b.iter(|| fwht_1d(black_box(v)).unwrap()));
        group.bench_with_input(BenchmarkId::new("naive", n), &v, |b, v| {
            b.iter(|| naive_transform(&h, black_box(v)))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("transform_2d");
    let x = Tensor::uniform(&[8, 64, 64], 1.0, &mut rng());
    group.bench_function("ht2d_8x64x64", |b| b.iter(|| ht2d(black_box(&x)).unwrap()));
    group.bench_function("dct2d_8x64x64", |b| b.iter(|| dct2d(black_box(&x)).unwrap()));
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut r = rng();
    let mut group = c.benchmark_group("conv2d");
    for (cin, cout, k, stride) in [(8, 16, 7, 2), (16, 16, 7, 1), (40, 8, 4, 1)] {
        let p = ConvParams::new(
            Tensor::uniform(&[cout, cin, k, k], 0.1, &mut r),
            Tensor::zeros(&[cout]),
            stride,
            (k - 1) / 2,
        )
        .unwrap();
        let x = Tensor::uniform(&[4, cin, 64, 64], 1.0, &mut r);
        let id = format!("{cin}to{cout}_k{k}_s{stride}");
        group.bench_function(BenchmarkId::new("forward", &id), |b| b.iter(|| conv2d_forward(black_box(&x), &p).unwrap()));
        let y = conv2d_forward(&x, &p).unwrap();
        group.bench_function(BenchmarkId::new("backward", &id), |b| {
            b.iter(|| conv2d_backward(black_box(&x), &p, &y).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, transforms, conv);
criterion_main!(benches);
