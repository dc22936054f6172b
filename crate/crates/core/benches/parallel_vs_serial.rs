use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

use rapk::kernel_lab::{centered_unit_sequence, monte_carlo_kernel};
use rapk::smoothers::random_transformer_smooth;
use rapk::{par, EncoderConfig, FeatureSequence, InitScheme};

// jobs = 1 pins a single worker; jobs = 0 uses the default pool. Built
// with `--no-default-features` both rows run the serial fallback.
const MODES: [(&str, usize); 2] = [("serial", 1), ("parallel", 0)];

fn kernel(c: &mut Criterion) {
    let x = centered_unit_sequence(10, 16, 1).unwrap();
    let mut g = c.benchmark_group("monte_carlo_kernel");
    g.sample_size(10);
    for (name, jobs) in MODES {
        g.bench_with_input(BenchmarkId::new(name, "dk256x400"), &jobs, |b, &jobs| {
            b.iter(|| par::with_jobs(jobs, || monte_carlo_kernel(black_box(&x), InitScheme::XAVIER_UNIFORM, 256, 400, 7)))
        });
    }
    g.finish();
}

fn transformer(c: &mut Criterion) {
    let x = FeatureSequence::new(Array2::from_shape_fn((1000, 128), |(i, j)| ((i * 31 + j * 17) % 23) as f64 / 23.0 - 0.5))
        .unwrap();
    let cfg = EncoderConfig::default();
    let mut g = c.benchmark_group("random_transformer_smooth");
    g.sample_size(10);
    for (name, jobs) in MODES {
        g.bench_with_input(BenchmarkId::new(name, "t1000_d128"), &jobs, |b, &jobs| {
            b.iter(|| par::with_jobs(jobs, || random_transformer_smooth(black_box(&x), &cfg)))
        });
    }
    g.finish();
}

criterion_group!(benches, kernel, transformer);
criterion_main!(benches);
