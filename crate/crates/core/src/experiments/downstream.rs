use super::{eval_noise_seed, test_items, ExperimentResult, NamedRestorer, ResultRow};
use crate::data::{add_gaussian_noise, Corpus};
use crate::error::{Error, Result};
use crate::metrics::miou;
use crate::trainer::{train, Mode, TrainConfig};
use crate::usa::{downsample_labels, usa_forward, UsaModule};

#[derive(Clone, Debug)]
pub struct DownstreamReport {
    pub result: ExperimentResult,
    pub segmenter: UsaModule<f32>,
}

/// Trains embedding and head with cross-entropy on the clean training split.
pub fn train_segmenter(cfg: &TrainConfig, corpus: &Corpus) -> Result<UsaModule<f32>> {
    let scfg = TrainConfig {
        mode: Mode::SegSupervised,
        train_embedding: true,
        ..cfg.clone()
    };
    Ok(train(&scfg, corpus)?.model.usa)
}

/// Mean mIoU (at the segmenter's output resolution) of each restorer's
/// outputs on noisy test images. Restored images are clipped to [0, 1]
/// before segmentation; every restorer sees the same noise.
pub fn evaluate_downstream(
    restorers: &[NamedRestorer],
    segmenter: &UsaModule<f32>,
    testset: &Corpus,
    sigma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if testset.is_empty() {
        return Err(Error::EmptyCorpus("downstream test set".into()));
    }
    if !testset.is_labeled() {
        return Err(Error::MissingLabels("downstream evaluation".into()));
    }
    let k = segmenter.k();
    let mut sums = vec![0.0; restorers.len()];
    for (i, item) in testset.items.iter().enumerate() {
        let noisy = add_gaussian_noise(&item.image, sigma, eval_noise_seed(seed, i))?.noisy;
        let gt = downsample_labels(item.labels.as_ref().expect("checked labeled"), 4)?;
        for (sum, r) in sums.iter_mut().zip(restorers) {
            let restored = r.restore(&noisy, &item.image)?.clipped();
            let pred = usa_forward(segmenter, &restored)?.argmax();
            *sum += miou(&pred, &gt, k)?;
        }
    }
    let n = testset.len() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// Trains a segmenter on clean images, then reports mIoU for the oracle
/// (clean input), the noisy input, and each denoiser.
pub fn run_downstream_seg(
    denoisers: &[NamedRestorer],
    seg_cfg: &TrainConfig,
    corpus: &Corpus,
    sigma: f64,
    seed: u64,
) -> Result<DownstreamReport> {
    let segmenter = train_segmenter(seg_cfg, corpus)?;
    let mut restorers = vec![NamedRestorer::oracle(), NamedRestorer::identity()];
    restorers.extend(denoisers.iter().cloned());
    let scores = evaluate_downstream(&restorers, &segmenter, &test_items(corpus), sigma, seed)?;
    let rows = restorers
        .iter()
        .zip(scores)
        .map(|(r, m)| ResultRow {
            miou: Some(m),
            ..ResultRow::new("downstream-seg", r.name.clone(), seed, Some(sigma))
        })
        .collect();
    Ok(DownstreamReport {
        result: ExperimentResult::new("downstream-seg", rows),
        segmenter,
    })
}
