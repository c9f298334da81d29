use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::downstream::evaluate_downstream;
use super::{evaluate_restorer, mean_var, ExperimentResult, NamedRestorer, ResultRow};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::metrics::format_metric;
use crate::rng::{derive_seed, tag};
use crate::usa::UsaModule;

/// Two-sided paired t-test of `a − b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub a: String,
    pub b: String,
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
    /// Set when the differences have zero variance; the p-value is then
    /// exactly 1 (all differences zero) or 0.
    pub degenerate: bool,
    /// Number of runs with `a ≥ b`.
    pub a_at_least_b: usize,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::shape("paired samples", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::param(format!("paired t-test needs n >= 2, got {}", a.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, var) = mean_var(&d);
    let n = d.len();
    let a_at_least_b = a.iter().zip(b).filter(|(x, y)| x >= y).count();
    let base = PairedTest {
        a: String::new(),
        b: String::new(),
        n,
        mean_diff: mean,
        t: 0.0,
        p_value: 1.0,
        degenerate: false,
        a_at_least_b,
    };
    if !mean.is_finite() || !var.is_finite() {
        return Err(Error::param("paired t-test on non-finite values"));
    }
    if var == 0.0 {
        let (t, p_value) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(PairedTest { t, p_value, degenerate: true, ..base });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::param(e.to_string()))?;
    let p_value = (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0);
    Ok(PairedTest { t, p_value, ..base })
}

/// The experiment repeated under fresh noise draws.
#[derive(Clone, Copy, Debug)]
pub enum Pipeline<'a> {
    /// Test-set PSNR of each restorer.
    Denoise {
        restorers: &'a [NamedRestorer],
        testset: &'a Corpus,
        sigma: f64,
        usa: &'a UsaModule<f32>,
    },
    /// Test-set mIoU of a fixed segmenter applied to each restorer's output.
    DownstreamSeg {
        restorers: &'a [NamedRestorer],
        segmenter: &'a UsaModule<f32>,
        testset: &'a Corpus,
        sigma: f64,
    },
}

impl Pipeline<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Denoise { .. } => "denoise",
            Pipeline::DownstreamSeg { .. } => "downstream-seg",
        }
    }

    pub fn metric(&self) -> &'static str {
        match self {
            Pipeline::Denoise { .. } => "psnr",
            Pipeline::DownstreamSeg { .. } => "miou",
        }
    }

    fn restorers(&self) -> &[NamedRestorer] {
        match self {
            Pipeline::Denoise { restorers, .. } | Pipeline::DownstreamSeg { restorers, .. } => restorers,
        }
    }

    fn sigma(&self) -> f64 {
        match self {
            Pipeline::Denoise { sigma, .. } | Pipeline::DownstreamSeg { sigma, .. } => *sigma,
        }
    }

    fn run(&self, seed: u64) -> Result<Vec<f64>> {
        match *self {
            Pipeline::Denoise { restorers, testset, sigma, usa } => restorers
                .iter()
                .map(|r| Ok(evaluate_restorer(r, testset, sigma, seed, usa, None)?.psnr))
                .collect(),
            Pipeline::DownstreamSeg { restorers, segmenter, testset, sigma } => {
                evaluate_downstream(restorers, segmenter, testset, sigma, seed)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub name: String,
    /// One test-set mean per noise run.
    pub values: Vec<f64>,
    pub mean: f64,
    /// Unbiased variance over noise runs.
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub pipeline: String,
    pub metric: String,
    pub sigma: f64,
    pub seed: u64,
    pub run_seeds: Vec<u64>,
    pub methods: Vec<MethodStats>,
    pub pairs: Vec<PairedTest>,
}

impl SignificanceReport {
    pub fn pair(&self, a: &str, b: &str) -> Option<&PairedTest> {
        self.pairs.iter().find(|p| p.a == a && p.b == b)
    }

    /// Per-run rows (metric in its own column) followed by one row per pair
    /// carrying the p-value.
    pub fn to_result(&self) -> ExperimentResult {
        let mut rows = Vec::new();
        for m in &self.methods {
            for (v, &s) in m.values.iter().zip(&self.run_seeds) {
                let mut row = ResultRow::new("significance", m.name.clone(), s, Some(self.sigma));
                match self.metric.as_str() {
                    "miou" => row.miou = Some(*v),
                    _ => row.psnr = Some(*v),
                }
                rows.push(row);
            }
        }
        for p in &self.pairs {
            rows.push(ResultRow {
                p_value: Some(p.p_value),
                ..ResultRow::new("significance", format!("{} vs {}", p.a, p.b), self.seed, Some(self.sigma))
            });
        }
        ExperimentResult::new("significance", rows)
    }

    /// Method summary; the variance column is over noise runs, not images.
    pub fn write_summary_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "pipeline", "metric", "method_a", "method_b", "n_runs", "mean_a", "variance_a_over_noise_runs",
            "mean_diff", "t", "p_value", "degenerate", "a_at_least_b",
        ])?;
        for m in &self.methods {
            out.write_record([
                self.pipeline.clone(),
                self.metric.clone(),
                m.name.clone(),
                String::new(),
                m.values.len().to_string(),
                format_metric(Some(m.mean)),
                format_metric(Some(m.variance)),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        for p in &self.pairs {
            out.write_record([
                self.pipeline.clone(),
                self.metric.clone(),
                p.a.clone(),
                p.b.clone(),
                p.n.to_string(),
                String::new(),
                String::new(),
                format_metric(Some(p.mean_diff)),
                format_metric(Some(p.t)),
                format_metric(Some(p.p_value)),
                p.degenerate.to_string(),
                p.a_at_least_b.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("significance csv", e))
    }
}

/// Repeats `pipeline` under `n_noise` independent noise draws (every method
/// sees the same draw within a run) and t-tests every ordered pair of
/// methods (earlier − later).
pub fn run_significance(pipeline: &Pipeline<'_>, n_noise: usize, seed: u64) -> Result<SignificanceReport> {
    if n_noise < 2 {
        return Err(Error::param(format!("n_noise must be >= 2, got {n_noise}")));
    }
    let names: Vec<String> = pipeline.restorers().iter().map(|r| r.name.clone()).collect();
    let run_seeds: Vec<u64> = (0..n_noise as u64)
        .map(|r| derive_seed(seed, &[tag("significance"), r]))
        .collect();
    let mut values = vec![Vec::with_capacity(n_noise); names.len()];
    for &s in &run_seeds {
        for (v, x) in values.iter_mut().zip(pipeline.run(s)?) {
            v.push(x);
        }
    }
    let methods: Vec<MethodStats> = names
        .iter()
        .zip(&values)
        .map(|(name, v)| {
            let (mean, variance) = mean_var(v);
            MethodStats { name: name.clone(), values: v.clone(), mean, variance }
        })
        .collect();
    let mut pairs = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            let t = paired_t_test(&methods[i].values, &methods[j].values)?;
            pairs.push(PairedTest { a: methods[i].name.clone(), b: methods[j].name.clone(), ..t });
        }
    }
    Ok(SignificanceReport {
        pipeline: pipeline.name().into(),
        metric: pipeline.metric().into(),
        sigma: pipeline.sigma(),
        seed,
        run_seeds,
        methods,
        pairs,
    })
}
