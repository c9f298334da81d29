//! Experiment drivers: denoising evaluation, the K sweep, the permuted-target
//! convergence study, downstream segmentation and repeated-noise
//! significance tests. Every driver is a pure function of its inputs and
//! seed; results are rows that serialize to a fixed CSV layout.

mod downstream;
mod permutation;
pub mod plots;
mod significance;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{denoiser_from_tensors, Checkpoint};
use crate::data::{add_gaussian_noise, Corpus, Image, Split};
use crate::denoiser::{denoise_forward, Denoiser};
use crate::error::{Error, Result};
use crate::metrics::{format_metric, mean_entropy, niqe, psnr, ssim, NiqeModel};
use crate::rng::{derive_seed, tag};
use crate::trainer::{train, Mode, Model, TrainConfig};
use crate::usa::{usa_forward, UsaModule};

pub use downstream::{evaluate_downstream, run_downstream_seg, train_segmenter, DownstreamReport};
pub use permutation::{run_permutation_experiment, Arm, PermutationReport, StepsToThreshold, SMOOTHING_WINDOW};
pub use significance::{
    paired_t_test, run_significance, MethodStats, PairedTest, Pipeline, SignificanceReport,
};

pub const RESULTS_HEADER: [&str; 10] = [
    "experiment", "condition", "seed", "sigma", "psnr", "ssim", "niqe", "entropy", "miou", "p_value",
];

/// One line of `results.csv`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub condition: String,
    pub seed: u64,
    pub sigma: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub niqe: Option<f64>,
    pub entropy: Option<f64>,
    pub miou: Option<f64>,
    pub p_value: Option<f64>,
}

impl ResultRow {
    pub fn new(experiment: &str, condition: impl Into<String>, seed: u64, sigma: Option<f64>) -> Self {
        Self {
            experiment: experiment.into(),
            condition: condition.into(),
            seed,
            sigma,
            ..Self::default()
        }
    }

    fn metrics(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("niqe", self.niqe),
            ("entropy", self.entropy),
            ("miou", self.miou),
            ("p_value", self.p_value),
        ]
    }
}

/// Mean and sample variance of one metric over the rows of one
/// (condition, sigma) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub condition: String,
    pub sigma: Option<f64>,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: String,
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl ExperimentResult {
    pub fn new(experiment: impl Into<String>, rows: Vec<ResultRow>) -> Self {
        let aggregates = aggregate(&rows);
        Self {
            experiment: experiment.into(),
            rows,
            aggregates,
        }
    }

    /// Rows of one condition, in insertion order.
    pub fn condition(&self, name: &str) -> impl Iterator<Item = &ResultRow> {
        let name = name.to_string();
        self.rows.iter().filter(move |r| r.condition == name)
    }

    pub fn aggregate_of(&self, condition: &str, metric: &str) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.condition == condition && a.metric == metric)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_rows(&self.rows, w)
    }

    pub fn write_aggregates_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["experiment", "condition", "sigma", "metric", "n", "mean", "variance"])?;
        for a in &self.aggregates {
            out.write_record([
                self.experiment.clone(),
                a.condition.clone(),
                format_metric(a.sigma),
                a.metric.clone(),
                a.n.to_string(),
                format_metric(Some(a.mean)),
                format_metric(Some(a.variance)),
            ])?;
        }
        out.flush().map_err(|e| Error::io("aggregates csv", e))
    }

    /// Writes `results.csv` and `aggregates.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p).map_err(|e| Error::io(&p, e))
        };
        self.write_csv(create("results.csv")?)?;
        self.write_aggregates_csv(create("aggregates.csv")?)
    }
}

pub fn write_rows(rows: &[ResultRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULTS_HEADER)?;
    for r in rows {
        out.write_record([
            r.experiment.clone(),
            r.condition.clone(),
            r.seed.to_string(),
            format_metric(r.sigma),
            format_metric(r.psnr),
            format_metric(r.ssim),
            format_metric(r.niqe),
            format_metric(r.entropy),
            format_metric(r.miou),
            format_metric(r.p_value),
        ])?;
    }
    out.flush().map_err(|e| Error::io("results csv", e))
}

fn sigma_key(s: Option<f64>) -> u64 {
    s.map_or(u64::MAX, f64::to_bits)
}

/// Groups rows by (condition, sigma) in first-appearance order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, Option<f64>)> = Vec::new();
    let mut groups: BTreeMap<(String, u64), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.condition.clone(), sigma_key(r.sigma));
        let g = groups.entry(key).or_default();
        if g.is_empty() {
            order.push((r.condition.clone(), r.sigma));
        }
        g.push(r);
    }
    let mut out = Vec::new();
    for (condition, sigma) in order {
        let g = &groups[&(condition.clone(), sigma_key(sigma))];
        for (i, (metric, _)) in g[0].metrics().iter().enumerate() {
            let vals: Vec<f64> = g.iter().filter_map(|r| r.metrics()[i].1).collect();
            if vals.is_empty() {
                continue;
            }
            let (mean, variance) = mean_var(&vals);
            out.push(AggregateRow {
                condition: condition.clone(),
                sigma,
                metric: metric.to_string(),
                n: vals.len(),
                mean,
                variance,
            });
        }
    }
    out
}

/// Mean and unbiased variance (0 for a single value).
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 || !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// How a condition turns a noisy image into a restored one.
#[derive(Clone, Debug, PartialEq)]
pub enum Restorer {
    /// Returns the noisy input unchanged.
    Identity,
    /// Returns the clean image (upper reference).
    Oracle,
    Net(Denoiser<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedRestorer {
    pub name: String,
    pub restorer: Restorer,
}

impl NamedRestorer {
    pub fn identity() -> Self {
        Self { name: "noisy".into(), restorer: Restorer::Identity }
    }

    pub fn oracle() -> Self {
        Self { name: "oracle".into(), restorer: Restorer::Oracle }
    }

    pub fn net(name: impl Into<String>, d: Denoiser<f32>) -> Self {
        Self { name: name.into(), restorer: Restorer::Net(d) }
    }

    pub fn restore(&self, noisy: &Image, clean: &Image) -> Result<Image> {
        match &self.restorer {
            Restorer::Identity => Ok(noisy.clone()),
            Restorer::Oracle => Ok(clean.clone()),
            Restorer::Net(d) => denoise_forward(d, noisy),
        }
    }
}

/// Everything stored in a training checkpoint, rebuilt.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub config: TrainConfig,
    pub model: Model<f32>,
}

/// Rebuilds the model and config from a training checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<LoadedModel> {
    let config: TrainConfig = serde_json::from_value(ckpt.meta["config"].clone())
        .map_err(|e| Error::Corruption(format!("checkpoint meta has no valid config: {e}")))?;
    let mut usa = UsaModule::random(config.channels, config.f_emb, config.k_classes, 0)?;
    usa.load_tensors(&ckpt.tensors)?;
    let denoiser = if config.mode.has_denoiser() {
        Some(denoiser_from_tensors(&ckpt.tensors)?)
    } else {
        None
    };
    Ok(LoadedModel {
        config,
        model: Model { denoiser, usa },
    })
}

/// Noise seed for image `i` of evaluation run `seed`; shared by every
/// condition so comparisons are paired.
pub fn eval_noise_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &[tag("eval-noise"), i as u64])
}

/// Per-image metrics of one restorer, averaged over the test set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMeans {
    pub psnr: f64,
    pub ssim: f64,
    pub niqe: Option<f64>,
    pub entropy: f64,
}

/// Evaluates one restorer on `testset` at one noise level.
pub fn evaluate_restorer(
    r: &NamedRestorer,
    testset: &Corpus,
    sigma: f64,
    seed: u64,
    usa: &UsaModule<f32>,
    niqe_model: Option<&NiqeModel>,
) -> Result<EvalMeans> {
    if testset.is_empty() {
        return Err(Error::EmptyCorpus("evaluation set".into()));
    }
    let (mut p, mut s, mut n, mut e) = (0.0, 0.0, 0.0, 0.0);
    for (i, item) in testset.items.iter().enumerate() {
        let noisy = add_gaussian_noise(&item.image, sigma, eval_noise_seed(seed, i))?.noisy;
        let restored = r.restore(&noisy, &item.image)?;
        p += psnr(&restored, &item.image, 1.0)?;
        s += ssim(&restored, &item.image)?;
        if let Some(m) = niqe_model {
            n += niqe(&restored, m)?;
        }
        e += mean_entropy(&usa_forward(usa, &restored)?);
    }
    let k = testset.len() as f64;
    Ok(EvalMeans {
        psnr: p / k,
        ssim: s / k,
        niqe: niqe_model.map(|_| n / k),
        entropy: e / k,
    })
}

fn eval_row(experiment: &str, condition: &str, seed: u64, sigma: f64, m: EvalMeans) -> ResultRow {
    ResultRow {
        psnr: Some(m.psnr),
        ssim: Some(m.ssim),
        niqe: m.niqe,
        entropy: Some(m.entropy),
        ..ResultRow::new(experiment, condition, seed, Some(sigma))
    }
}

/// Test images to evaluate on: the test split, or the whole corpus when it
/// has no test items.
pub fn test_items(corpus: &Corpus) -> Corpus {
    let t = corpus.subset(Split::Test);
    if t.is_empty() {
        corpus.clone()
    } else {
        t
    }
}

/// One row per (restorer, sigma). The entropy column uses `usa` for every
/// restorer so the values are comparable.
pub fn run_denoising_eval(
    restorers: &[NamedRestorer],
    testset: &Corpus,
    sigmas: &[f64],
    seed: u64,
    usa: &UsaModule<f32>,
    niqe_model: Option<&NiqeModel>,
) -> Result<ExperimentResult> {
    let mut rows = Vec::new();
    for r in restorers {
        for &sigma in sigmas {
            let m = evaluate_restorer(r, testset, sigma, seed, usa, niqe_model)?;
            rows.push(eval_row("eval", &r.name, seed, sigma, m));
        }
    }
    Ok(ExperimentResult::new("eval", rows))
}

/// Trains one segmentation-aware denoiser per K (shared seeds) and evaluates
/// each at `sigma`. A failed K yields a row whose condition ends in
/// `:failed` and whose metrics are empty; the sweep continues.
pub fn run_k_ablation(
    ks: &[usize],
    cfg: &TrainConfig,
    corpus: &Corpus,
    sigma: f64,
    seed: u64,
    niqe_model: Option<&NiqeModel>,
) -> Result<ExperimentResult> {
    if let Some(k) = ks.iter().find(|&&k| k < 2) {
        return Err(Error::param(format!("every K must be >= 2, got {k}")));
    }
    let testset = test_items(corpus);
    let mut rows = Vec::new();
    for &k in ks {
        let kcfg = TrainConfig {
            mode: Mode::Usaid,
            k_classes: k,
            seed,
            ..cfg.clone()
        };
        let outcome = train(&kcfg, corpus).and_then(|o| {
            let d = o.model.denoiser.clone().ok_or_else(|| Error::param("no denoiser"))?;
            evaluate_restorer(&NamedRestorer::net("usaid", d), &testset, sigma, seed, &o.model.usa, niqe_model)
        });
        match outcome {
            Ok(m) => rows.push(eval_row("ablate-k", &format!("K={k}"), seed, sigma, m)),
            Err(e) => {
                log::warn!("K={k} failed: {e}");
                rows.push(ResultRow::new("ablate-k", format!("K={k}:failed"), seed, Some(sigma)));
            }
        }
    }
    Ok(ExperimentResult::new("ablate-k", rows))
}

#[cfg(test)]
mod tests;
