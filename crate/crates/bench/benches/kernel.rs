use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sruxx_core::kernel::{sru_forward_fused, sru_forward_naive, RecurrenceParams};
use sruxx_core::Tensor;

fn noise(shape: &[usize], salt: usize) -> Tensor<f32> {
    // Deterministic values in [-1, 1).
    Tensor::from_fn(shape, |i| {
        (((i + salt) * 2654435761usize) % 2000) as f32 / 1000.0 - 1.0
    })
}

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("sru_forward");
    group.sample_size(10);
    for &(len, batch, d) in &[(1, 16, 256), (256, 16, 256), (1024, 16, 256)] {
        let u = noise(&[len, batch, 3 * d], 1);
        let x = noise(&[len, batch, d], 2);
        let c0 = noise(&[batch, d], 3);
        let params = RecurrenceParams {
            v_f: noise(&[d], 4).scale(0.5),
            v_r: noise(&[d], 5).scale(0.5),
            b_f: noise(&[d], 6),
            b_r: noise(&[d], 7),
        };
        let id = format!("L{len}_B{batch}_d{d}");
        group.bench_function(BenchmarkId::new("fused", &id), |b| {
            b.iter(|| sru_forward_fused(&u, &x, &params, &c0, false).unwrap())
        });
        group.bench_function(BenchmarkId::new("naive", &id), |b| {
            b.iter(|| sru_forward_naive(&u, &x, &params, &c0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
