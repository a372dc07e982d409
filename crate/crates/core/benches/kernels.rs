use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use fairgp::ebm::{ConvolutionFilter, ImpulseParams, TimeGrid};
use fairgp::kernels::{
    forcing_gram, forcing_gram_with_gradients, internal_variability_gram, propagate_both,
    VariabilityMode,
};
use nalgebra::DMatrix;

mod common;

fn impulse() -> ImpulseParams {
    ImpulseParams::new(vec![4.1, 249.0], vec![0.33, 0.41], 0.6).unwrap()
}

fn inputs(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 3, |i, j| ((i as f64) * 0.01 * (j + 1) as f64).sin())
}

fn benches(c: &mut Criterion) {
    let config = fairgp::synthetic::emulator_config().params.kernel;
    for n in [250, 750] {
        let x = inputs(n);
        common::compare(c, "forcing_gram", n, || {
            black_box(forcing_gram(&x, &x, &config).unwrap());
        });
        common::compare(c, "forcing_gram_with_gradients", n, || {
            black_box(forcing_gram_with_gradients(&x, &config).unwrap());
        });
        let k = forcing_gram(&x, &x, &config).unwrap();
        let filter = ConvolutionFilter::new(&impulse(), 1.0);
        let segments = [0..n / 3, n / 3..2 * n / 3, 2 * n / 3..n];
        common::compare(c, "propagate_both", n, || {
            black_box(propagate_both(&k, &filter, &segments));
        });
        let grid = TimeGrid::annual(1850, n).unwrap();
        common::compare(c, "variability_gram_exact", n, || {
            black_box(internal_variability_gram(
                &impulse(),
                &grid,
                VariabilityMode::Exact,
            ));
        });
    }
}

criterion_group!(kernel_benches, benches);
criterion_main!(kernel_benches);
