//! Fixtures shared by the benchmarks.

use usaid_core::data::{generate_shapes_corpus, Corpus};
use usaid_core::trainer::{Mode, TrainConfig};

/// Desk-scale training config used by the step benchmarks.
pub fn bench_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        k_classes: 6,
        depth: 5,
        width: 16,
        f_emb: 64,
        batch_size: 8,
        patch: 40,
        sigma_range: [25.0, 25.0],
        ..TrainConfig::default()
    }
}

pub fn bench_corpus() -> Corpus {
    generate_shapes_corpus(8, (64, 64), 6, 1).expect("valid generator arguments")
}
