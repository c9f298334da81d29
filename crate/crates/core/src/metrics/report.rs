use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::format_metric;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub niqe: Option<f64>,
    pub miou: Option<f64>,
    pub mean_entropy: Option<f64>,
}

/// Per-image metrics for one denoiser at one noise level, plus their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub denoiser: String,
    pub sigma: f64,
    pub images: Vec<ImageMetrics>,
    pub aggregate: ImageMetrics,
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = vals.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn new(denoiser: impl Into<String>, sigma: f64, images: Vec<ImageMetrics>) -> Self {
        let n = images.len().max(1) as f64;
        let aggregate = ImageMetrics {
            image: "mean".into(),
            psnr_db: images.iter().map(|m| m.psnr_db).sum::<f64>() / n,
            ssim: images.iter().map(|m| m.ssim).sum::<f64>() / n,
            niqe: mean_opt(images.iter().map(|m| m.niqe)),
            miou: mean_opt(images.iter().map(|m| m.miou)),
            mean_entropy: mean_opt(images.iter().map(|m| m.mean_entropy)),
        };
        Self {
            denoiser: denoiser.into(),
            sigma,
            images,
            aggregate,
        }
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["denoiser", "sigma", "image", "psnr_db", "ssim", "niqe", "miou", "mean_entropy"])?;
        for m in self.images.iter().chain(std::iter::once(&self.aggregate)) {
            out.write_record([
                self.denoiser.clone(),
                self.sigma.to_string(),
                m.image.clone(),
                format_metric(Some(m.psnr_db)),
                format_metric(Some(m.ssim)),
                format_metric(m.niqe),
                format_metric(m.miou),
                format_metric(m.mean_entropy),
            ])?;
        }
        out.flush().map_err(|e| Error::io("metrics csv", e))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
