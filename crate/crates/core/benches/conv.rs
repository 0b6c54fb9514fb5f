use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use skyprior::conv::{conv2d_same_with, ConvBackend, PaddingMode};
use std::hint::black_box;

fn bench_conv(c: &mut Criterion) {
    let img = Array2::from_shape_fn((64, 64), |(i, j)| ((i * 31 + j * 17) % 23) as f32);
    for k in [5usize, 9, 13] {
        let kernel = Array2::from_elem((k, k), 1.0 / (k * k) as f32);
        for (name, backend) in [("direct", ConvBackend::Direct), ("fft", ConvBackend::Fft)] {
            c.bench_function(&format!("conv64_k{k}_{name}"), |b| {
                b.iter(|| conv2d_same_with(backend, black_box(img.view()), kernel.view(), PaddingMode::Reflect).unwrap())
            });
        }
    }
}

criterion_group!(benches, bench_conv);
criterion_main!(benches);
