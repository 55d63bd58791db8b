use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use useq_core::parallel::Execution;
use useq_core::sample_spaces::{DistributionSpec, RngStream};
use useq_core::ustat_core::{simulate_normalized_paths, CircleWindow, KernelSpec, Normalizer, PowerRule};

fn replicates(c: &mut Criterion) {
    let kernel: KernelSpec = Arc::new(CircleWindow { width_rule: PowerRule { c: 1.0, a: 0.75 } });
    let dist = DistributionSpec::CircleUniform;
    let grid = [0.25, 0.5, 0.75, 1.0];
    let mut group = c.benchmark_group("replicates");
    group.sample_size(10);
    for n in [256usize, 1024] {
        let h = 1.0 * (n as f64).powf(-0.75);
        let sigma2 = (n * (n - 1) / 2) as f64 * 2.0 * h * (1.0 - 2.0 * h);
        let norm = Normalizer::new(2, 0.0, sigma2).unwrap();
        for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, n), &n, |b, &n| {
                b.iter(|| simulate_normalized_paths(kernel.as_ref(), &dist, n, &grid, &norm, 64, RngStream::new(1, 0), exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, replicates);
criterion_main!(benches);
