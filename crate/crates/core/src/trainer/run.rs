use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{content_hash, denoiser_tensors, usa_tensors, Checkpoint, NamedTensor};
use crate::data::{add_gaussian_noise, permute_blocks, permute_pixels, sample_patches, Corpus, Split};
use crate::denoiser::{denoise_forward, Denoiser};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::rng::{derive_seed, rng_from, tag};
use crate::trainer::config::{lr_at, Mode, TrainConfig};
use crate::trainer::objective::{loss_and_grads, LossBreakdown, Model, TrainSample, Trainability};
use crate::trainer::optim::{adam_step, AdamState};
use crate::usa::{init_usa, usa_forward, UsaModule, entropy_loss};

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_psnr: f64,
    pub val_entropy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Total loss after every optimizer step (when enabled in the config).
    pub step_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "epoch", "lr", "mse", "usa", "ce", "total", "val_psnr", "val_entropy", "seconds",
        ])?;
        for r in &self.epochs {
            out.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.loss.mse.to_string(),
                r.loss.usa.to_string(),
                r.loss.ce.to_string(),
                r.loss.total.to_string(),
                r.val_psnr.to_string(),
                r.val_entropy.to_string(),
                format!("{:.3}", r.seconds),
            ])?;
        }
        out.flush().map_err(|e| Error::io("history.csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub history: TrainHistory,
    pub checkpoint: Checkpoint,
    /// Hash of the embedding tensors before and after training.
    pub embedding_hash: (String, String),
}

fn embedding_tensors(usa: &UsaModule<f32>) -> Vec<NamedTensor> {
    usa_tensors(usa)
        .into_iter()
        .filter(|t| t.name.starts_with("usa.embed"))
        .collect()
}

/// Builds the initial model for a config: He-initialized denoiser (when the
/// mode has one) and the Gaussian or loaded segmentation module.
pub fn init_model(cfg: &TrainConfig) -> Result<Model<f32>> {
    let denoiser = if cfg.mode.has_denoiser() {
        Some(Denoiser::init(cfg.depth, cfg.width, cfg.channels, derive_seed(cfg.seed, &[tag("denoiser")]))?)
    } else {
        None
    };
    let usa = init_usa(
        cfg.channels,
        cfg.f_emb,
        cfg.k_classes,
        derive_seed(cfg.seed, &[tag("usa")]),
        cfg.usa_weights.as_deref(),
    )?;
    Ok(Model { denoiser, usa })
}

/// Checkpoint holding every model tensor plus the config and hashes.
pub fn model_checkpoint(model: &Model<f32>, cfg: &TrainConfig, epoch: usize) -> Checkpoint {
    let mut tensors = model.denoiser.as_ref().map(denoiser_tensors).unwrap_or_default();
    tensors.extend(usa_tensors(&model.usa));
    let meta = json!({
        "config": cfg,
        "epoch": epoch,
        "seeds": {
            "master": cfg.seed,
            "denoiser": derive_seed(cfg.seed, &[tag("denoiser")]),
            "usa": derive_seed(cfg.seed, &[tag("usa")]),
        },
        "embedding_hash": content_hash(&embedding_tensors(&model.usa)),
        "param_hash": content_hash(&tensors),
    });
    Checkpoint { tensors, meta }
}

/// Validation PSNR (metric-time clipping) and mean prediction entropy at a
/// fixed noise level with per-image seeds that do not change across epochs.
pub fn validate(model: &Model<f32>, val: &Corpus, sigma: f64, seed: u64) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut psnr_sum, mut ent_sum) = (0.0, 0.0);
    for (i, item) in val.items.iter().enumerate() {
        let sample = add_gaussian_noise(&item.image, sigma, derive_seed(seed, &[tag("val"), i as u64]))?;
        let restored = match &model.denoiser {
            Some(d) => denoise_forward(d, &sample.noisy)?,
            None => sample.noisy.clone(),
        };
        psnr_sum += psnr(&restored, &item.image, 1.0)?;
        ent_sum += entropy_loss(&usa_forward(&model.usa, &restored)?);
    }
    let n = val.len() as f64;
    Ok((psnr_sum / n, ent_sum / n))
}

/// Training targets: ground truth, or a per-image permutation of it.
fn prepare_train_corpus(cfg: &TrainConfig, corpus: &Corpus) -> Result<Corpus> {
    let mut train = corpus.subset(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptyCorpus("no training items".into()));
    }
    if cfg.mode.needs_labels() && !train.is_labeled() {
        return Err(Error::MissingLabels(cfg.mode.to_string()));
    }
    if let Some(k) = train.k_classes.filter(|_| cfg.mode.needs_labels()) {
        if k != cfg.k_classes {
            return Err(Error::param(format!("corpus has K={k}, config has K={}", cfg.k_classes)));
        }
    }
    for (i, item) in train.items.iter_mut().enumerate() {
        let pseed = derive_seed(cfg.seed, &[tag("permute"), i as u64]);
        match (cfg.mode, item.labels.as_ref()) {
            (Mode::SegPermutedBlocks, Some(seg)) => {
                let p = permute_blocks(seg, pseed);
                if p.cropped {
                    item.image = item.image.crop(0, 0, p.map.height, p.map.width);
                }
                item.labels = Some(p.map);
            }
            (Mode::SegPermutedPixels, Some(seg)) => item.labels = Some(permute_pixels(seg, pseed)),
            _ => {}
        }
    }
    Ok(train)
}

fn valid_positions(corpus: &Corpus, patch: usize) -> u64 {
    corpus
        .items
        .iter()
        .map(|it| {
            (it.image.height.saturating_sub(patch - 1) * it.image.width.saturating_sub(patch - 1)) as u64
        })
        .sum()
}

/// Assembles the batch for a global step: patches, per-patch noise levels
/// and noise draws are all keyed by (seed, step).
pub fn make_batch(cfg: &TrainConfig, train: &Corpus, step: usize) -> Result<Vec<TrainSample<f32>>> {
    let step = step as u64;
    let patches = sample_patches(train, cfg.patch, cfg.batch_size, derive_seed(cfg.seed, &[tag("batch"), step]))?;
    let mut sigma_rng = rng_from(cfg.seed, &[tag("sigma"), step]);
    let [lo, hi] = cfg.sigma_range;
    patches
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let clean = p.image.to_feature_map::<f32>();
            let noisy = if cfg.mode.has_denoiser() {
                let sigma = if hi > lo { sigma_rng.random_range(lo..=hi) } else { lo };
                let seed = derive_seed(cfg.seed, &[tag("noise"), step, i as u64]);
                add_gaussian_noise(&p.image, sigma, seed)?.noisy.to_feature_map()
            } else {
                clean.clone()
            };
            Ok(TrainSample {
                clean,
                noisy,
                target: p.labels,
            })
        })
        .collect()
}

/// Steps per epoch: `⌈valid positions / batch⌉`, capped by the config.
pub fn steps_per_epoch(cfg: &TrainConfig, train: &Corpus) -> usize {
    let full = valid_positions(train, cfg.patch).div_ceil(cfg.batch_size as u64) as usize;
    cfg.steps_per_epoch.map_or(full, |cap| full.min(cap)).max(1)
}

/// Full optimization loop.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_from(cfg, corpus, init_model(cfg)?)
}

/// Like [`train`], starting from a given model.
pub fn train_from(cfg: &TrainConfig, corpus: &Corpus, mut model: Model<f32>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("training corpus".into()));
    }
    let train = prepare_train_corpus(cfg, corpus)?;
    let val = {
        let v = corpus.subset(Split::Val);
        if v.is_empty() {
            corpus.subset(Split::Test)
        } else {
            v
        }
    };
    let tr = Trainability::for_config(cfg);
    let hash_before = content_hash(&embedding_tensors(&model.usa));
    let mut adam = AdamState::new(&model, tr);
    let mut history = TrainHistory::default();
    let steps = steps_per_epoch(cfg, &train);
    log::info!(
        "training {} for {} epochs x {} steps (batch {}, patch {})",
        cfg.mode, cfg.epochs, steps, cfg.batch_size, cfg.patch
    );

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut acc = [0.0f64; 4];
        let mut last_weights = None;
        for s in 0..steps {
            let global = epoch * steps + s;
            let batch = make_batch(cfg, &train, global)?;
            let (loss, grads) = loss_and_grads(&model, &batch, cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    step: global,
                    loss: loss.total,
                });
            }
            adam_step(&mut adam, &mut model, tr, &grads, lr)?;
            for (a, v) in acc.iter_mut().zip([loss.mse, loss.usa, loss.ce, loss.total]) {
                *a += v;
            }
            last_weights = Some(loss.weights);
            if cfg.record_steps {
                history.step_losses.push(loss.total);
            }
        }
        let n = steps as f64;
        let (val_psnr, val_entropy) =
            validate(&model, &val, cfg.val_sigma, derive_seed(cfg.seed, &[tag("validation")]))?;
        let record = EpochRecord {
            epoch,
            lr,
            loss: LossBreakdown {
                mse: acc[0] / n,
                usa: acc[1] / n,
                ce: acc[2] / n,
                total: acc[3] / n,
                weights: last_weights.unwrap_or_default(),
            },
            val_psnr,
            val_entropy,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.1e} total {:.5} val psnr {val_psnr:.3} entropy {val_entropy:.5}",
            record.loss.total
        );
        history.epochs.push(record);
    }

    let hash_after = content_hash(&embedding_tensors(&model.usa));
    if !tr.embedding && hash_after != hash_before {
        return Err(Error::Corruption("frozen embedding changed during training".into()));
    }
    let checkpoint = model_checkpoint(&model, cfg, cfg.epochs);
    Ok(TrainOutcome {
        model,
        history,
        checkpoint,
        embedding_hash: (hash_before, hash_after),
    })
}
