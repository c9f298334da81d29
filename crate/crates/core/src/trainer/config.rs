use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Reconstruction loss only.
    MseOnly,
    /// Reconstruction plus `gamma ×` mean prediction entropy of the frozen
    /// segmentation module on the denoised output.
    Usaid,
    /// Reconstruction plus pixel-wise cross-entropy against ground truth,
    /// unit weights.
    Ssaid,
    /// Segmentation-only training on clean images (no denoiser).
    SegSupervised,
    SegPermutedBlocks,
    SegPermutedPixels,
}

impl Mode {
    pub fn has_denoiser(self) -> bool {
        matches!(self, Mode::MseOnly | Mode::Usaid | Mode::Ssaid)
    }

    pub fn needs_labels(self) -> bool {
        !matches!(self, Mode::MseOnly | Mode::Usaid)
    }

    pub fn is_segmentation(self) -> bool {
        !self.has_denoiser()
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::MseOnly => "mse_only",
            Mode::Usaid => "usaid",
            Mode::Ssaid => "ssaid",
            Mode::SegSupervised => "seg_supervised",
            Mode::SegPermutedBlocks => "seg_permuted_blocks",
            Mode::SegPermutedPixels => "seg_permuted_pixels",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::param(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub gamma: f64,
    pub k_classes: usize,
    /// Noise std range on the 0–255 scale; `lo == hi` means a fixed level.
    pub sigma_range: [f64; 2],
    pub batch_size: usize,
    pub patch: usize,
    pub lr0: f64,
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    /// Upper bound on optimizer steps per epoch.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub train_head: bool,
    /// Lets segmentation modes update the embedding as well as the head.
    pub train_embedding: bool,
    pub depth: usize,
    pub width: usize,
    pub channels: usize,
    pub f_emb: usize,
    /// Reserved; batch normalization is not implemented.
    pub batch_norm: bool,
    pub val_sigma: f64,
    /// Optional checkpoint providing embedding/head weights.
    pub usa_weights: Option<PathBuf>,
    /// Keep the per-step loss trace in the history.
    pub record_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Usaid,
            gamma: 1.0,
            k_classes: 21,
            sigma_range: [0.0, 55.0],
            batch_size: 16,
            patch: 48,
            lr0: 1e-3,
            decay_epochs: vec![10, 40, 80],
            epochs: 100,
            steps_per_epoch: None,
            seed: 0,
            train_head: false,
            train_embedding: false,
            depth: 7,
            width: 32,
            channels: 3,
            f_emb: 64,
            batch_norm: false,
            val_sigma: 25.0,
            usa_weights: None,
            record_steps: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.sigma_range;
        if !(self.gamma >= 0.0) {
            return Err(Error::param(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 255.0) {
            return Err(Error::param(format!("sigma_range must satisfy 0 <= lo <= hi <= 255, got [{lo}, {hi}]")));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("decay_epochs must be strictly increasing"));
        }
        if self.k_classes < 2 {
            return Err(Error::param("k_classes must be >= 2"));
        }
        if self.batch_size == 0 || self.patch == 0 {
            return Err(Error::param("batch_size and patch must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::param("steps_per_epoch must be positive"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::param("lr0 must be positive"));
        }
        if self.batch_norm {
            return Err(Error::Unsupported("batch normalization in the denoiser".into()));
        }
        if self.mode.has_denoiser() && self.depth < 2 {
            return Err(Error::param("depth must be >= 2"));
        }
        Ok(())
    }

    /// Parses a TOML or JSON document (chosen by extension, JSON when the
    /// extension is `.json`). Missing keys take their defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr0 · 10^(−#{d ∈ decay_epochs : d ≤ epoch})`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.lr0 * 10f64.powi(-(decays as i32))
}
