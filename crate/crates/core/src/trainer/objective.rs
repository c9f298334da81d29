use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SegMap;
use crate::denoiser::{mse_with_grad, Denoiser};
use crate::error::{Error, Result};
use crate::tensor::{Conv3x3, ConvGrad, FeatureMap, Real};
use crate::trainer::config::{Mode, TrainConfig};
use crate::usa::{ce_with_grad, downsample_labels, entropy_loss, entropy_with_grad, softmax, UsaGrads, UsaModule};

/// Named gradient tensors, one entry per trainable parameter tensor.
pub type Gradients<T> = BTreeMap<String, Vec<T>>;

/// Denoiser plus segmentation module. The denoiser is absent in the
/// segmentation-only modes.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub denoiser: Option<Denoiser<T>>,
    pub usa: UsaModule<T>,
}

/// Which parts of the model receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainability {
    pub denoiser: bool,
    pub embedding: bool,
    pub head: bool,
}

impl Trainability {
    pub fn for_config(cfg: &TrainConfig) -> Self {
        if cfg.mode.is_segmentation() {
            Self {
                denoiser: false,
                embedding: cfg.train_embedding,
                head: true,
            }
        } else {
            Self {
                denoiser: true,
                embedding: false,
                head: cfg.train_head,
            }
        }
    }
}

impl<T: Real> Model<T> {
    /// Every conv layer with its tensor-name prefix and trainability.
    pub fn layers(&self, tr: Trainability) -> Vec<(String, &Conv3x3<T>, bool)> {
        let mut v = Vec::new();
        if let Some(d) = &self.denoiser {
            for (i, l) in d.layers.iter().enumerate() {
                v.push((format!("denoiser.conv{i}"), l, tr.denoiser));
            }
        }
        v.push(("usa.embed.conv1".into(), &self.usa.embedding.conv1, tr.embedding));
        v.push(("usa.embed.conv2".into(), &self.usa.embedding.conv2, tr.embedding));
        v.push(("usa.head".into(), &self.usa.head.conv, tr.head));
        v
    }

    pub fn layers_mut(&mut self, tr: Trainability) -> Vec<(String, &mut Conv3x3<T>, bool)> {
        let mut v = Vec::new();
        if let Some(d) = &mut self.denoiser {
            for (i, l) in d.layers.iter_mut().enumerate() {
                v.push((format!("denoiser.conv{i}"), l, tr.denoiser));
            }
        }
        v.push(("usa.embed.conv1".into(), &mut self.usa.embedding.conv1, tr.embedding));
        v.push(("usa.embed.conv2".into(), &mut self.usa.embedding.conv2, tr.embedding));
        v.push(("usa.head".into(), &mut self.usa.head.conv, tr.head));
        v
    }

    /// Names of all trainable tensors.
    pub fn trainable_names(&self, tr: Trainability) -> Vec<String> {
        self.layers(tr)
            .into_iter()
            .filter(|(_, _, t)| *t)
            .flat_map(|(p, _, _)| [format!("{p}.weight"), format!("{p}.bias")])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            denoiser: self.denoiser.as_ref().map(Denoiser::cast),
            usa: self.usa.cast(),
        }
    }
}

/// Coefficients applied to each term of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub usa: f64,
    pub ce: f64,
}

impl LossWeights {
    pub fn for_config(cfg: &TrainConfig) -> Self {
        match cfg.mode {
            Mode::MseOnly => Self { mse: 1.0, usa: 0.0, ce: 0.0 },
            Mode::Usaid => Self { mse: 1.0, usa: cfg.gamma, ce: 0.0 },
            Mode::Ssaid => Self { mse: 1.0, usa: 0.0, ce: 1.0 },
            Mode::SegSupervised | Mode::SegPermutedBlocks | Mode::SegPermutedPixels => {
                Self { mse: 0.0, usa: 0.0, ce: 1.0 }
            }
        }
    }
}

/// One step's objective decomposition (batch means). Terms that the mode
/// does not compute are NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub usa: f64,
    pub ce: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Recombines the parts; terms with zero weight are skipped so NaN
    /// placeholders do not propagate.
    pub fn recombine(&self) -> f64 {
        let w = self.weights;
        let term = |wt: f64, v: f64| if wt == 0.0 { 0.0 } else { wt * v };
        term(w.mse, self.mse) + term(w.usa, self.usa) + term(w.ce, self.ce)
    }
}

/// One training example: a clean patch, its noisy version, and an optional
/// full-resolution target map.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub clean: FeatureMap<T>,
    pub noisy: FeatureMap<T>,
    pub target: Option<SegMap>,
}

fn push_conv_grad<T: Real>(out: &mut Gradients<T>, prefix: &str, g: ConvGrad<T>) {
    out.insert(format!("{prefix}.weight"), g.weight);
    out.insert(format!("{prefix}.bias"), g.bias);
}

/// Mean objective over the batch and gradients for every trainable tensor.
///
/// Frozen tensors never appear in the returned map. The segmentation term is
/// evaluated on the denoised output in the denoising modes and on the clean
/// input in the segmentation-only modes.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    batch: &[TrainSample<T>],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let mode = cfg.mode;
    if mode.needs_labels() && batch.iter().any(|s| s.target.is_none()) {
        return Err(Error::MissingLabels(mode.to_string()));
    }
    let tr = Trainability::for_config(cfg);
    let weights = LossWeights::for_config(cfg);
    let inv_b = 1.0 / batch.len() as f64;
    let usa = &model.usa;
    let mut usa_grads = UsaGrads::new(usa, tr.embedding, tr.head);
    let mut den_grads = model.denoiser.as_ref().map(Denoiser::zero_grads);
    let (mut mse_sum, mut usa_sum, mut ce_sum) = (0.0, 0.0, 0.0);

    for sample in batch {
        let target = match &sample.target {
            Some(t) if mode.needs_labels() => Some(downsample_labels(t, 4)?),
            _ => None,
        };
        if let Some(den) = &model.denoiser.as_ref().filter(|_| mode.has_denoiser()) {
            let (out, tape) = den.forward_tape(&sample.noisy);
            let (mse, mut d_out) = mse_with_grad(&out, &sample.clean, T::from_f64_lossy(inv_b));
            mse_sum += mse;
            let (logits, utape) = usa.forward_tape(&out);
            match mode {
                Mode::Usaid if weights.usa > 0.0 => {
                    let (ent, d_logits) = entropy_with_grad(&logits, weights.usa * inv_b);
                    usa_sum += ent;
                    let dx = usa
                        .backward(&utape, &d_logits, &mut usa_grads, true)
                        .expect("input gradient requested");
                    for (a, b) in d_out.data.iter_mut().zip(&dx.data) {
                        *a += *b;
                    }
                }
                Mode::Ssaid => {
                    let t = target.as_ref().expect("checked above");
                    let (ce, d_logits) = ce_with_grad(&logits, t, weights.ce * inv_b)?;
                    ce_sum += ce;
                    usa_sum += entropy_loss(&softmax(&logits));
                    let dx = usa
                        .backward(&utape, &d_logits, &mut usa_grads, true)
                        .expect("input gradient requested");
                    for (a, b) in d_out.data.iter_mut().zip(&dx.data) {
                        *a += *b;
                    }
                }
                _ => usa_sum += entropy_loss(&softmax(&logits)),
            }
            den.backward(&tape, &d_out, den_grads.as_mut().expect("denoiser present"));
        } else {
            if mode.has_denoiser() {
                return Err(Error::param(format!("mode {mode} requires a denoiser")));
            }
            let t = target.as_ref().expect("segmentation modes need labels");
            let (logits, utape) = usa.forward_tape(&sample.clean);
            let (ce, d_logits) = ce_with_grad(&logits, t, inv_b)?;
            ce_sum += ce;
            usa_sum += entropy_loss(&softmax(&logits));
            usa.backward(&utape, &d_logits, &mut usa_grads, false);
        }
    }

    let mean = |s: f64, used: bool| if used { s * inv_b } else { f64::NAN };
    let mut loss = LossBreakdown {
        mse: mean(mse_sum, mode.has_denoiser()),
        usa: usa_sum * inv_b,
        ce: mean(ce_sum, mode.needs_labels()),
        total: 0.0,
        weights,
    };
    loss.total = loss.recombine();

    let mut grads = Gradients::new();
    if tr.denoiser {
        if let Some(g) = den_grads {
            for (i, g) in g.into_iter().enumerate() {
                push_conv_grad(&mut grads, &format!("denoiser.conv{i}"), g);
            }
        }
    }
    if let Some((g1, g2)) = usa_grads.embedding {
        push_conv_grad(&mut grads, "usa.embed.conv1", g1);
        push_conv_grad(&mut grads, "usa.embed.conv2", g2);
    }
    if let Some(g) = usa_grads.head {
        push_conv_grad(&mut grads, "usa.head", g);
    }
    Ok((loss, grads))
}
