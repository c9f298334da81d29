//! Denoising with an unsupervised segmentation-aware objective: synthetic
//! data, a residual conv denoiser, a frozen random segmentation module,
//! training, metrics and experiment drivers.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod usa;

pub use data::{Corpus, CorpusItem, Image, SegMap, Split};
pub use denoiser::Denoiser;
pub use error::{Error, Result};
pub use metrics::{MetricsReport, NiqeModel};
pub use trainer::{Mode, TrainConfig};
pub use usa::{ProbMap, UsaModule};
