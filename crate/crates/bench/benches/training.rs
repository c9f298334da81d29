use std::hint::black_box;

use criterion::Criterion;
use usaid_bench::{bench_config, bench_corpus};
use usaid_core::trainer::{init_model, loss_and_grads, make_batch, Mode};

pub fn bench(c: &mut Criterion) {
    let corpus = bench_corpus();
    let mut g = c.benchmark_group("training_step");
    g.sample_size(10);
    for mode in [Mode::MseOnly, Mode::Usaid, Mode::Ssaid] {
        let cfg = bench_config(mode);
        let model = init_model(&cfg).unwrap();
        let batch = make_batch(&cfg, &corpus, 0).unwrap();
        g.bench_function(mode.name(), |b| b.iter(|| black_box(loss_and_grads(&model, &batch, &cfg).unwrap())));
    }
    g.finish();
}
