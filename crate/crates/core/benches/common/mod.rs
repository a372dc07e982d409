//! Runs each benchmark on a one-thread pool and on the default pool.

use criterion::{BenchmarkId, Criterion};

pub fn compare<F: Fn() + Sync>(c: &mut Criterion, group: &str, size: usize, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(20);
    let pools = [
        (
            "sequential",
            rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .expect("pool"),
        ),
        (
            "parallel",
            rayon::ThreadPoolBuilder::new().build().expect("pool"),
        ),
    ];
    for (name, pool) in &pools {
        g.bench_with_input(BenchmarkId::new(*name, size), &size, |b, _| {
            pool.install(|| b.iter(&f))
        });
    }
    g.finish();
}
