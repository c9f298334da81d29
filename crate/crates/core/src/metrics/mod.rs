//! Full-reference (PSNR, SSIM) and no-reference (NIQE) image quality,
//! segmentation accuracy (mIoU) and mean prediction entropy.

mod niqe;
mod report;

pub use niqe::{
    fit_aggd, fit_ggd, fit_niqe, fit_niqe_with, niqe, niqe_detailed, niqe_patch_features, AggdFit, NiqeModel,
    NiqeOptions, NiqeScore, NIQE_FEATURES,
};
pub use report::{ImageMetrics, MetricsReport};

use crate::data::{Image, SegMap};
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::usa::{entropy_loss, ProbMap};

/// PSNR in dB between two equally sized sample sets, both clipped to
/// `[0, peak]`. Identical inputs give `+inf`.
pub fn psnr_slices(a: &[f64], b: &[f64], peak: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.clamp(0.0, peak) - y.clamp(0.0, peak);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let a: Vec<f64> = a.data.iter().map(|&v| f64::from(v)).collect();
    let b: Vec<f64> = b.data.iter().map(|&v| f64::from(v)).collect();
    Ok(psnr_slices(&a, &b, peak))
}

/// Formats a metric for CSV output (`inf` for the identical-image sentinel,
/// empty for missing values).
pub fn format_metric(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) if v == f64::NEG_INFINITY => "-inf".into(),
        Some(v) => v.to_string(),
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM on luminance (11×11 Gaussian window, σ = 1.5,
/// `C1 = (0.01·peak)²`, `C2 = (0.03·peak)²`, peak 1), averaged over valid
/// window positions. Inputs are clipped to `[0, 1]` first.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::param(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.height, a.width
        )));
    }
    let la: Vec<f64> = a.clipped().luma();
    let lb: Vec<f64> = b.clipped().luma();
    Ok(ssim_planes(&la, &lb, a.height, a.width))
}

pub(crate) fn ssim_planes(la: &[f64], lb: &[f64], h: usize, w: usize) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let aa: Vec<f64> = la.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = la.iter().zip(lb).map(|(x, y)| x * y).collect();
    let (mu_a, oh, ow) = filter_valid(la, h, w, &k);
    let (mu_b, ..) = filter_valid(lb, h, w, &k);
    let (e_aa, ..) = filter_valid(&aa, h, w, &k);
    let (e_bb, ..) = filter_valid(&bb, h, w, &k);
    let (e_ab, ..) = filter_valid(&ab, h, w, &k);
    let n = oh * ow;
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean over classes present in either map of `|pred ∩ gt| / |pred ∪ gt|`.
pub fn miou(pred: &SegMap, gt: &SegMap, k: usize) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape("miou", (gt.height, gt.width), (pred.height, pred.width)));
    }
    let mut inter = vec![0usize; k];
    let mut union = vec![0usize; k];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        for l in [p, g] {
            if l as usize >= k {
                return Err(Error::LabelOutOfRange { label: l, k });
            }
        }
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let present: Vec<f64> = (0..k)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if present.is_empty() {
        return Ok(1.0);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Mean per-pixel entropy of a probability map (nats).
pub fn mean_entropy<T: Real>(pm: &ProbMap<T>) -> f64 {
    entropy_loss(pm)
}
