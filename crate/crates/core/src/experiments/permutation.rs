use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ExperimentResult, ResultRow};
use crate::data::{Corpus, SegMap};
use crate::error::{Error, Result};
use crate::metrics::{format_metric, mean_entropy, miou};
use crate::trainer::{train, Mode, TrainConfig};
use crate::usa::{downsample_labels, usa_forward};

/// Supervision target of one arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    True,
    Blocks,
    Pixels,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::True, Arm::Blocks, Arm::Pixels];

    pub fn mode(self) -> Mode {
        match self {
            Arm::True => Mode::SegSupervised,
            Arm::Blocks => Mode::SegPermutedBlocks,
            Arm::Pixels => Mode::SegPermutedPixels,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::True => "true",
            Arm::Blocks => "blocks",
            Arm::Pixels => "pixels",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepsToThreshold {
    pub arm: Arm,
    pub seed: u64,
    pub tau: f64,
    /// First step at which the trailing mean of the batch loss is at most
    /// `tau`; `None` if never.
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub result: ExperimentResult,
    /// (arm, seed, per-step cross-entropy).
    pub curves: Vec<(Arm, u64, Vec<f64>)>,
    pub steps: Vec<StepsToThreshold>,
}

impl PermutationReport {
    /// Median steps-to-threshold over seeds; unreached runs count as ∞.
    pub fn median_steps(&self, arm: Arm, tau: f64) -> f64 {
        let mut v: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.arm == arm && s.tau == tau)
            .map(|s| s.steps.map_or(f64::INFINITY, |n| n as f64))
            .collect();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => v[n / 2],
            n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
        }
    }

    pub fn curve(&self, arm: Arm, seed: u64) -> Option<&[f64]> {
        self.curves
            .iter()
            .find(|(a, s, _)| *a == arm && *s == seed)
            .map(|(_, _, c)| c.as_slice())
    }

    /// `arm,seed,tau,steps` with `inf` for unreached thresholds.
    pub fn write_steps_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["arm", "seed", "tau", "steps"])?;
        for s in &self.steps {
            out.write_record([
                s.arm.to_string(),
                s.seed.to_string(),
                s.tau.to_string(),
                s.steps.map_or("inf".into(), |n| n.to_string()),
            ])?;
        }
        out.flush().map_err(|e| Error::io("steps csv", e))
    }

    /// Long format: `arm,seed,step,loss`.
    pub fn write_curves_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["arm", "seed", "step", "loss"])?;
        for (arm, seed, c) in &self.curves {
            for (i, l) in c.iter().enumerate() {
                out.write_record([arm.to_string(), seed.to_string(), i.to_string(), format_metric(Some(*l))])?;
            }
        }
        out.flush().map_err(|e| Error::io("curves csv", e))
    }
}

/// Window of the trailing mean used for steps-to-threshold. Single batch
/// losses are too noisy: a batch dominated by one class can dip below the
/// threshold long before the arm has fit anything.
pub const SMOOTHING_WINDOW: usize = 20;

/// Index of the last step of the first full window whose mean is `<= tau`.
pub(crate) fn first_below(curve: &[f64], tau: f64) -> Option<usize> {
    let w = SMOOTHING_WINDOW;
    if curve.len() < w {
        return None;
    }
    let mut sum: f64 = curve[..w].iter().sum();
    for i in w - 1..curve.len() {
        if i >= w {
            sum += curve[i] - curve[i - w];
        }
        if sum / w as f64 <= tau {
            return Some(i);
        }
    }
    None
}

/// Trains the segmentation head (and the embedding when the config says so)
/// against true, block-permuted and pixel-permuted targets with identical
/// initialization and batch seeds, recording per-step cross-entropy.
///
/// Rows report, per arm and seed, the mean prediction entropy and the mIoU of
/// the final predictions against the true maps of the training images.
pub fn run_permutation_experiment(
    cfg: &TrainConfig,
    corpus: &Corpus,
    thresholds: &[f64],
    seeds: &[u64],
) -> Result<PermutationReport> {
    if !corpus.is_labeled() {
        return Err(Error::MissingLabels("permutation experiment".into()));
    }
    if seeds.len() < 3 {
        return Err(Error::param(format!("need at least 3 seeds, got {}", seeds.len())));
    }
    let train_items = corpus.subset(crate::data::Split::Train);
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut steps = Vec::new();
    for &seed in seeds {
        for arm in Arm::ALL {
            let acfg = TrainConfig {
                mode: arm.mode(),
                seed,
                record_steps: true,
                ..cfg.clone()
            };
            let out = train(&acfg, corpus)?;
            for &tau in thresholds {
                steps.push(StepsToThreshold {
                    arm,
                    seed,
                    tau,
                    steps: first_below(&out.history.step_losses, tau),
                });
            }
            let (mut ent, mut iou) = (0.0, 0.0);
            for item in &train_items.items {
                let pm = usa_forward(&out.model.usa, &item.image)?;
                ent += mean_entropy(&pm);
                let gt: &SegMap = item.labels.as_ref().expect("labeled corpus");
                iou += miou(&pm.argmax(), &downsample_labels(gt, 4)?, cfg.k_classes)?;
            }
            let n = train_items.len().max(1) as f64;
            rows.push(ResultRow {
                entropy: Some(ent / n),
                miou: Some(iou / n),
                ..ResultRow::new("permute-exp", arm.to_string(), seed, None)
            });
            curves.push((arm, seed, out.history.step_losses));
        }
    }
    Ok(PermutationReport {
        result: ExperimentResult::new("permute-exp", rows),
        curves,
        steps,
    })
}
