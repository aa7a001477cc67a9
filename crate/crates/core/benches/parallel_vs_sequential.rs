use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use epss_core::{batch_endpoints, sample_prior, EpssPreset, Exec, GaussianMixture, SolveOptions, SwayCoefficient};

fn batch_sampling(c: &mut Criterion) {
    let field = GaussianMixture::benchmark();
    let schedule = EpssPreset::Nfe7.schedule(SwayCoefficient::new(-1.0).unwrap()).unwrap();
    let opts = SolveOptions::midpoint();
    let mut group = c.benchmark_group("batch_endpoints");
    for batch in [256, 4096] {
        let x0 = sample_prior(batch, 2, 0).unwrap();
        for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, batch), &x0, |b, x0| {
                b.iter(|| batch_endpoints(&field, black_box(x0), &schedule, &opts, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch_sampling);
criterion_main!(benches);
