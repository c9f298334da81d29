mod kernels;
mod training;

use criterion::{criterion_group, criterion_main};

criterion_group!(benches, kernels::bench, training::bench);
criterion_main!(benches);
