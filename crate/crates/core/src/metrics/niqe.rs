//! Natural-scene-statistics quality score.
//!
//! Per patch, MSCN coefficients and their four neighbour products are
//! summarized by (asymmetric) generalized Gaussian fits at two scales, giving
//! 36 features. A model is the mean and covariance of those features over
//! sharp pristine patches; an image is scored by the Mahalanobis-style
//! distance between its own feature statistics and the model's.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde_json::json;
use statrs::function::gamma::ln_gamma;

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::data::{Corpus, Image};
use crate::error::{Error, Result};

pub const NIQE_FEATURES: usize = 36;
const MSCN_WINDOW: usize = 7;
const MSCN_C: f64 = 1e-3;
const ALPHA_MIN: f64 = 0.2;
const ALPHA_STEP: f64 = 0.001;
const ALPHA_COUNT: usize = 9801; // 0.2 ..= 10.0

#[derive(Clone, Debug, PartialEq)]
pub struct NiqeOptions {
    pub patch: usize,
    /// Fraction of the sharpest patches kept when fitting.
    pub keep_fraction: f64,
    /// Minimum number of patches left after sharpness selection.
    pub min_patches: usize,
    /// Optional cap on the patches kept, applied after sharpness selection.
    pub max_patches: Option<usize>,
}

impl Default for NiqeOptions {
    fn default() -> Self {
        Self {
            patch: 48,
            keep_fraction: 0.75,
            min_patches: 50,
            max_patches: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiqeModel {
    pub mean: Vec<f64>,
    /// Row-major `36×36`.
    pub cov: Vec<f64>,
    pub patch: usize,
    pub n_patches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NiqeScore {
    pub score: f64,
    /// Condition number of the pooled covariance (∞ when singular).
    pub condition_number: f64,
}

/// Asymmetric generalized Gaussian parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggdFit {
    pub alpha: f64,
    pub eta: f64,
    pub left_var: f64,
    pub right_var: f64,
}

fn gamma_ratio_table() -> &'static [(f64, f64)] {
    // (alpha, Γ(2/α)² / (Γ(1/α)Γ(3/α))), increasing in alpha
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..ALPHA_COUNT)
            .map(|i| {
                let a = ALPHA_MIN + i as f64 * ALPHA_STEP;
                let r = (2.0 * ln_gamma(2.0 / a) - ln_gamma(1.0 / a) - ln_gamma(3.0 / a)).exp();
                (a, r)
            })
            .collect()
    })
}

/// Grid value of alpha whose ratio is closest to `target`.
fn solve_alpha(target: f64) -> f64 {
    let table = gamma_ratio_table();
    let i = table.partition_point(|&(_, r)| r < target);
    if i == 0 {
        return table[0].0;
    }
    if i >= table.len() {
        return table[table.len() - 1].0;
    }
    let (lo, hi) = (table[i - 1], table[i]);
    if (target - lo.1).abs() <= (hi.1 - target).abs() {
        lo.0
    } else {
        hi.0
    }
}

/// Symmetric generalized Gaussian fit: `(alpha, variance)`.
pub fn fit_ggd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if var <= 0.0 {
        return (ALPHA_MIN + (ALPHA_COUNT - 1) as f64 * ALPHA_STEP, 0.0);
    }
    (solve_alpha(mean_abs * mean_abs / var), var)
}

/// Moment-matching AGGD fit.
pub fn fit_aggd(x: &[f64]) -> AggdFit {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
        abs_sum += v.abs();
        sq_sum += v * v;
    }
    let n = x.len() as f64;
    if sq_sum <= 0.0 || ln == 0 || rn == 0 {
        let var = if n > 0.0 { sq_sum / n } else { 0.0 };
        return AggdFit {
            alpha: ALPHA_MIN + (ALPHA_COUNT - 1) as f64 * ALPHA_STEP,
            eta: 0.0,
            left_var: if ln > 0 { ls / ln as f64 } else { var },
            right_var: if rn > 0 { rs / rn as f64 } else { var },
        };
    }
    let left_std = (ls / ln as f64).sqrt();
    let right_std = (rs / rn as f64).sqrt();
    let g = left_std / right_std;
    let r_hat = (abs_sum / n).powi(2) / (sq_sum / n);
    let r_norm = r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let alpha = solve_alpha(r_norm);
    let scale = (ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp().sqrt();
    let (bl, br) = (left_std * scale, right_std * scale);
    let eta = (br - bl) * (ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha)).exp();
    AggdFit {
        alpha,
        eta,
        left_var: left_std * left_std,
        right_var: right_std * right_std,
    }
}

struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

fn blur_same(p: &Plane, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * p.data[y * p.w + reflect(x as isize + i as isize - r, p.w)])
                .sum();
        }
    }
    let mut out = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, p.h) * p.w + x])
                .sum();
        }
    }
    out
}

/// MSCN coefficients and the local standard deviation map.
fn mscn(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let k = super::gaussian_kernel(MSCN_WINDOW, MSCN_WINDOW as f64 / 6.0);
    let mu = blur_same(p, &k);
    let sq = Plane {
        h: p.h,
        w: p.w,
        data: p.data.iter().map(|v| v * v).collect(),
    };
    let mu_sq = blur_same(&sq, &k);
    let sigma: Vec<f64> = mu_sq
        .iter()
        .zip(&mu)
        .map(|(s, m)| (s - m * m).abs().sqrt())
        .collect();
    let coeffs = p
        .data
        .iter()
        .zip(&mu)
        .zip(&sigma)
        .map(|((v, m), s)| (v - m) / (s + MSCN_C))
        .collect();
    (coeffs, sigma)
}

fn half(p: &Plane) -> Plane {
    let (h, w) = (p.h / 2, p.w / 2);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s = p.data[2 * y * p.w + 2 * x]
                + p.data[2 * y * p.w + 2 * x + 1]
                + p.data[(2 * y + 1) * p.w + 2 * x]
                + p.data[(2 * y + 1) * p.w + 2 * x + 1];
            data[y * w + x] = s / 4.0;
        }
    }
    Plane { h, w, data }
}

fn scale_features(coeffs: &[f64], w: usize, top: usize, left: usize, size: usize, out: &mut Vec<f64>) {
    let at = |y: usize, x: usize| coeffs[y * w + x];
    let block: Vec<f64> = (top..top + size)
        .flat_map(|y| (left..left + size).map(move |x| (y, x)))
        .map(|(y, x)| at(y, x))
        .collect();
    let (alpha, var) = fit_ggd(&block);
    out.push(alpha);
    out.push(var);
    // horizontal, vertical, main diagonal, anti-diagonal neighbour products
    let shifts: [(usize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    for (dy, dx) in shifts {
        let mut prod = Vec::with_capacity(size * size);
        for y in top..top + size - dy {
            for x in left..left + size {
                let nx = x as isize + dx;
                if nx < left as isize || nx >= (left + size) as isize {
                    continue;
                }
                prod.push(at(y, x) * at(y + dy, nx as usize));
            }
        }
        let f = fit_aggd(&prod);
        out.extend([f.alpha, f.eta, f.left_var, f.right_var]);
    }
}

/// Features and sharpness of every non-overlapping `patch×patch` block.
pub fn niqe_patch_features(img: &Image, patch: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    if patch < 4 || patch % 2 != 0 {
        return Err(Error::param(format!("NIQE patch size must be even and >= 4, got {patch}")));
    }
    let luma = img.clipped().luma();
    let p1 = Plane {
        h: img.height,
        w: img.width,
        data: luma,
    };
    let p2 = half(&p1);
    let (m1, s1) = mscn(&p1);
    let (m2, _) = mscn(&p2);
    let (rows, cols) = (img.height / patch, img.width / patch);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (top, left) = (r * patch, c * patch);
            let mut feats = Vec::with_capacity(NIQE_FEATURES);
            scale_features(&m1, p1.w, top, left, patch, &mut feats);
            scale_features(&m2, p2.w, top / 2, left / 2, patch / 2, &mut feats);
            let sharp = (top..top + patch)
                .flat_map(|y| (left..left + patch).map(move |x| (y, x)))
                .map(|(y, x)| s1[y * p1.w + x])
                .sum::<f64>()
                / (patch * patch) as f64;
            out.push((feats, sharp));
        }
    }
    Ok(out)
}

fn mean_cov(rows: &[&Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let d = NIQE_FEATURES;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (mean, cov)
}

pub fn fit_niqe(pristine: &Corpus, patch: usize) -> Result<NiqeModel> {
    fit_niqe_with(
        pristine,
        &NiqeOptions {
            patch,
            ..NiqeOptions::default()
        },
    )
}

/// Fits the model on the sharpest patches of a pristine corpus (items in
/// corpus order, so the fit is deterministic).
pub fn fit_niqe_with(pristine: &Corpus, opts: &NiqeOptions) -> Result<NiqeModel> {
    let mut all = Vec::new();
    for item in &pristine.items {
        all.extend(niqe_patch_features(&item.image, opts.patch)?);
    }
    let mut keep = ((all.len() as f64) * opts.keep_fraction).ceil() as usize;
    if let Some(cap) = opts.max_patches {
        keep = keep.min(cap);
    }
    if keep < opts.min_patches.max(2) {
        return Err(Error::TooFewPatches {
            needed: opts.min_patches.max(2),
            found: keep,
        });
    }
    // stable sort keeps ties in corpus order
    all.sort_by(|a, b| b.1.total_cmp(&a.1));
    let rows: Vec<&Vec<f64>> = all[..keep].iter().map(|(f, _)| f).collect();
    let (mean, cov) = mean_cov(&rows);
    Ok(NiqeModel {
        mean,
        cov,
        patch: opts.patch,
        n_patches: keep,
    })
}

pub fn niqe(img: &Image, model: &NiqeModel) -> Result<f64> {
    Ok(niqe_detailed(img, model)?.score)
}

pub fn niqe_detailed(img: &Image, model: &NiqeModel) -> Result<NiqeScore> {
    let feats = niqe_patch_features(img, model.patch)?;
    if feats.len() < 4 {
        return Err(Error::TooFewPatches {
            needed: 4,
            found: feats.len(),
        });
    }
    let rows: Vec<&Vec<f64>> = feats.iter().map(|(f, _)| f).collect();
    let (mu_img, cov_img) = mean_cov(&rows);
    let d = NIQE_FEATURES;
    let pooled = DMatrix::from_fn(d, d, |i, j| (model.cov[i * d + j] + cov_img[i * d + j]) / 2.0);
    let svd = pooled.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    let condition_number = if min_sv > 0.0 { max_sv / min_sv } else { f64::INFINITY };
    let tol = max_sv * d as f64 * f64::EPSILON;
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| Error::param(format!("pseudo-inverse failed: {e}")))?;
    let diff = DVector::from_fn(d, |i, _| model.mean[i] - mu_img[i]);
    let q = (diff.transpose() * pinv * &diff)[(0, 0)];
    if condition_number > 1e12 {
        log::debug!("NIQE pooled covariance is ill-conditioned (cond {condition_number:.3e})");
    }
    Ok(NiqeScore {
        score: q.max(0.0).sqrt(),
        condition_number,
    })
}

impl NiqeModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let d = NIQE_FEATURES;
        Checkpoint {
            tensors: vec![
                NamedTensor::new("niqe.mean", vec![d], self.mean.iter().map(|&v| v as f32).collect()),
                NamedTensor::new("niqe.cov", vec![d, d], self.cov.iter().map(|&v| v as f32).collect()),
            ],
            meta: json!({ "kind": "niqe_model", "patch": self.patch, "n_patches": self.n_patches }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let d = NIQE_FEATURES;
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| Error::shape(format!("tensor {name}"), shape, "missing"))?;
            if t.shape != shape {
                return Err(Error::shape(format!("tensor {name}"), shape, &t.shape));
            }
            Ok(t.data.iter().map(|&v| f64::from(v)).collect())
        };
        let patch = ckpt.meta["patch"]
            .as_u64()
            .ok_or_else(|| Error::Corruption("NIQE meta lacks patch size".into()))? as usize;
        Ok(Self {
            mean: get("niqe.mean", &[d])?,
            cov: get("niqe.cov", &[d, d])?,
            patch,
            n_patches: ckpt.meta["n_patches"].as_u64().unwrap_or(0) as usize,
        })
    }

    /// Largest absolute asymmetry and most negative eigenvalue of the
    /// covariance.
    pub fn covariance_check(&self) -> (f64, f64) {
        let d = NIQE_FEATURES;
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        let asym = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| (m[(i, j)] - m[(j, i)]).abs())
            .fold(0.0, f64::max);
        let min_eig = m.symmetric_eigenvalues().min();
        (asym, min_eig)
    }
}
