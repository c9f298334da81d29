//! Segmentation-awareness module: a frozen random convolutional embedding
//! at quarter resolution followed by a K-class 3×3 head and a per-pixel
//! softmax. The mean per-pixel entropy of the softmax is the unsupervised
//! penalty; pixel-wise cross-entropy is the supervised alternative.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, NamedTensor};
use crate::data::{Image, SegMap};
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};
use crate::tensor::{relu_backward_inplace, relu_inplace, Conv3x3, ConvGrad, FeatureMap, Real};

/// Standard deviation of the Gaussian initialization of embedding and head.
pub const USA_INIT_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    RandomGaussian,
    Loaded,
}

/// Two stride-2 3×3 conv stages with ReLU: `C → F → F` at `⌈H/4⌉×⌈W/4⌉`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T> {
    pub conv1: Conv3x3<T>,
    pub conv2: Conv3x3<T>,
    pub init: InitMode,
}

/// One 3×3 conv mapping the embedding to K logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub conv: Conv3x3<T>,
}

impl<T: Real> Head<T> {
    pub fn k(&self) -> usize {
        self.conv.out_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UsaModule<T> {
    pub embedding: Embedding<T>,
    pub head: Head<T>,
}

/// Per-pixel class probabilities, planar `K×H'×W'`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T = f32> {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<T>,
}

impl<T: Real> ProbMap<T> {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn prob(&self, class: usize, y: usize, x: usize) -> T {
        self.probs[(class * self.height + y) * self.width + x]
    }

    pub fn uniform(k: usize, height: usize, width: usize) -> Self {
        Self {
            k,
            height,
            width,
            probs: vec![T::one() / T::from_f64_lossy(k as f64); k * height * width],
        }
    }

    /// Arg-max class per pixel.
    pub fn argmax(&self) -> SegMap {
        let p = self.pixels();
        let labels = (0..p)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.k {
                    if self.probs[c * p + i] > self.probs[best * p + i] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        SegMap {
            height: self.height,
            width: self.width,
            num_classes: self.k,
            labels,
        }
    }

    /// Checks the simplex invariant at every pixel.
    pub fn is_valid(&self, tol: f64) -> bool {
        let p = self.pixels();
        (0..p).all(|i| {
            let mut s = 0.0;
            for c in 0..self.k {
                let v = self.probs[c * p + i].as_f64();
                if !(v >= 0.0) {
                    return false;
                }
                s += v;
            }
            (s - 1.0).abs() <= tol
        })
    }
}

fn gaussian_conv<T: Real>(cin: usize, cout: usize, stride: usize, seed: u64, layer: u64) -> Conv3x3<T> {
    let mut conv = Conv3x3::zeros(cin, cout, stride);
    let normal = Normal::new(0.0, USA_INIT_STD).expect("positive std");
    let mut rng = rng_from(seed, &[tag("usa"), layer]);
    for w in &mut conv.weight {
        *w = T::from_f64_lossy(normal.sample(&mut rng));
    }
    conv
}

fn assign_tensor<T: Real>(
    tensors: &[NamedTensor],
    name: &str,
    expected: &[usize],
    dst: &mut [T],
) -> Result<()> {
    let t = tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::shape(format!("tensor {name}"), expected, "missing"))?;
    if t.shape != expected {
        return Err(Error::shape(format!("tensor {name}"), expected, &t.shape));
    }
    for (d, &s) in dst.iter_mut().zip(&t.data) {
        *d = T::from_f64_lossy(f64::from(s));
    }
    Ok(())
}

impl<T: Real> UsaModule<T> {
    pub fn random(channels: usize, f_emb: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::param(format!("k must be >= 2, got {k}")));
        }
        if f_emb == 0 {
            return Err(Error::param("f_emb must be >= 1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::param(format!("channels must be 1 or 3, got {channels}")));
        }
        Ok(Self {
            embedding: Embedding {
                conv1: gaussian_conv(channels, f_emb, 2, seed, 0),
                conv2: gaussian_conv(f_emb, f_emb, 2, seed, 1),
                init: InitMode::RandomGaussian,
            },
            head: Head {
                conv: gaussian_conv(f_emb, k, 1, seed, 2),
            },
        })
    }

    pub fn channels(&self) -> usize {
        self.embedding.conv1.in_channels
    }

    pub fn f_emb(&self) -> usize {
        self.embedding.conv1.out_channels
    }

    pub fn k(&self) -> usize {
        self.head.k()
    }

    /// Overwrites parameters from named tensors, checking every shape.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let c1 = self.embedding.conv1.weight_shape();
        let c2 = self.embedding.conv2.weight_shape();
        let hd = self.head.conv.weight_shape();
        let f = self.f_emb();
        let k = self.k();
        assign_tensor(tensors, "usa.embed.conv1.weight", &c1, &mut self.embedding.conv1.weight)?;
        assign_tensor(tensors, "usa.embed.conv1.bias", &[f], &mut self.embedding.conv1.bias)?;
        assign_tensor(tensors, "usa.embed.conv2.weight", &c2, &mut self.embedding.conv2.weight)?;
        assign_tensor(tensors, "usa.embed.conv2.bias", &[f], &mut self.embedding.conv2.bias)?;
        assign_tensor(tensors, "usa.head.weight", &hd, &mut self.head.conv.weight)?;
        assign_tensor(tensors, "usa.head.bias", &[k], &mut self.head.conv.bias)?;
        self.embedding.init = InitMode::Loaded;
        Ok(())
    }

    pub fn logits(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let (mut a1, _) = self.embedding.conv1.forward(x);
        relu_inplace(&mut a1.data);
        let (mut a2, _) = self.embedding.conv2.forward(&a1);
        relu_inplace(&mut a2.data);
        self.head.conv.forward(&a2).0
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> ProbMap<T> {
        softmax(&self.logits(x))
    }

    pub fn forward_tape(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, UsaTape<T>) {
        let (mut a1, col1) = self.embedding.conv1.forward(x);
        relu_inplace(&mut a1.data);
        let (mut a2, col2) = self.embedding.conv2.forward(&a1);
        relu_inplace(&mut a2.data);
        let (logits, col3) = self.head.conv.forward(&a2);
        let tape = UsaTape {
            input_shape: x.shape(),
            col1,
            col2,
            col3,
            a1,
            a2,
        };
        (logits, tape)
    }

    /// Backpropagates `d loss / d logits`. Parameter gradients are
    /// accumulated only for the parts whose slot is `Some`; the input
    /// gradient is returned when requested.
    pub fn backward(
        &self,
        tape: &UsaTape<T>,
        d_logits: &FeatureMap<T>,
        grads: &mut UsaGrads<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let need_emb = grads.embedding.is_some();
        let need_a2 = need_emb || need_input_grad;
        let mut d2 = self.head.conv.backward(
            tape.a2.shape(),
            &tape.col3,
            d_logits,
            grads.head.as_mut(),
            need_a2,
        )?;
        relu_backward_inplace(&mut d2.data, &tape.a2.data);
        let (g1, g2) = match grads.embedding.as_mut() {
            Some((g1, g2)) => (Some(g1), Some(g2)),
            None => (None, None),
        };
        let mut d1 = self
            .embedding
            .conv2
            .backward(tape.a1.shape(), &tape.col2, &d2, g2, true)
            .expect("input grad requested");
        relu_backward_inplace(&mut d1.data, &tape.a1.data);
        self.embedding
            .conv1
            .backward(tape.input_shape, &tape.col1, &d1, g1, need_input_grad)
    }

    pub fn cast<U: Real>(&self) -> UsaModule<U> {
        fn conv<T: Real, U: Real>(c: &Conv3x3<T>) -> Conv3x3<U> {
            Conv3x3 {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                stride: c.stride,
                weight: c.weight.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                bias: c.bias.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            }
        }
        UsaModule {
            embedding: Embedding {
                conv1: conv(&self.embedding.conv1),
                conv2: conv(&self.embedding.conv2),
                init: self.embedding.init,
            },
            head: Head {
                conv: conv(&self.head.conv),
            },
        }
    }
}

#[derive(Debug)]
pub struct UsaTape<T> {
    input_shape: [usize; 3],
    col1: Vec<T>,
    col2: Vec<T>,
    col3: Vec<T>,
    a1: FeatureMap<T>,
    a2: FeatureMap<T>,
}

/// Gradient slots; `None` marks a frozen part.
#[derive(Clone, Debug, PartialEq)]
pub struct UsaGrads<T> {
    pub embedding: Option<(ConvGrad<T>, ConvGrad<T>)>,
    pub head: Option<ConvGrad<T>>,
}

impl<T: Real> UsaGrads<T> {
    pub fn new(usa: &UsaModule<T>, train_embedding: bool, train_head: bool) -> Self {
        Self {
            embedding: train_embedding.then(|| {
                (
                    ConvGrad::zeros_like(&usa.embedding.conv1),
                    ConvGrad::zeros_like(&usa.embedding.conv2),
                )
            }),
            head: train_head.then(|| ConvGrad::zeros_like(&usa.head.conv)),
        }
    }
}

/// Builds the module: Gaussian initialization, or tensors loaded from a
/// checkpoint container when `weights_path` is given.
pub fn init_usa(
    channels: usize,
    f_emb: usize,
    k: usize,
    seed: u64,
    weights_path: Option<&Path>,
) -> Result<UsaModule<f32>> {
    let mut usa = UsaModule::random(channels, f_emb, k, seed)?;
    if let Some(path) = weights_path {
        let ckpt = load_checkpoint(path)?;
        usa.load_tensors(&ckpt.tensors)?;
    }
    Ok(usa)
}

/// Runs embedding and head on an image.
pub fn usa_forward<T: Real>(usa: &UsaModule<T>, img: &Image) -> Result<ProbMap<T>> {
    if img.channels != usa.channels() {
        return Err(Error::shape("usa input channels", usa.channels(), img.channels));
    }
    Ok(usa.forward(&img.to_feature_map()))
}

/// Per-pixel softmax over the channel axis with max subtraction.
pub fn softmax<T: Real>(logits: &FeatureMap<T>) -> ProbMap<T> {
    let k = logits.channels;
    let p = logits.plane_len();
    let mut probs = vec![T::zero(); k * p];
    for i in 0..p {
        let mut m = logits.data[i];
        for c in 1..k {
            m = m.max(logits.data[c * p + i]);
        }
        let mut s = T::zero();
        for c in 0..k {
            let e = (logits.data[c * p + i] - m).exp();
            probs[c * p + i] = e;
            s += e;
        }
        for c in 0..k {
            probs[c * p + i] = probs[c * p + i] / s;
        }
    }
    ProbMap {
        k,
        height: logits.height,
        width: logits.width,
        probs,
    }
}

#[inline]
fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

/// Mean over pixels of `−Σ_k p ln p` (nats, `0·ln 0 = 0`).
///
/// Each pixel's terms are summed in sorted order, so relabeling the classes
/// gives a bitwise identical result.
pub fn entropy_loss<T: Real>(pm: &ProbMap<T>) -> f64 {
    let p = pm.pixels();
    if p == 0 {
        return 0.0;
    }
    let mut terms = vec![0.0; pm.k];
    let mut total = 0.0;
    for i in 0..p {
        for (c, t) in terms.iter_mut().enumerate() {
            *t = -xlogx(pm.probs[c * p + i].as_f64());
        }
        terms.sort_unstable_by(f64::total_cmp);
        total += terms.iter().sum::<f64>();
    }
    total / p as f64
}

/// Mean entropy of `softmax(logits)` and its gradient with respect to the
/// logits, scaled by `weight`.
pub(crate) fn entropy_with_grad<T: Real>(logits: &FeatureMap<T>, weight: f64) -> (f64, FeatureMap<T>) {
    let pm = softmax(logits);
    let (k, p) = (pm.k, pm.pixels());
    let scale = weight / p as f64;
    let mut grad = FeatureMap::zeros(k, logits.height, logits.width);
    let mut total = 0.0;
    for i in 0..p {
        let mut h = 0.0;
        for c in 0..k {
            h -= xlogx(pm.probs[c * p + i].as_f64());
        }
        total += h;
        // dH/dz_c = −p_c (ln p_c + H)
        for c in 0..k {
            let pc = pm.probs[c * p + i].as_f64();
            let lnp = if pc > 0.0 { pc.ln() } else { 0.0 };
            grad.data[c * p + i] = T::from_f64_lossy(-scale * pc * (lnp + h));
        }
    }
    (total / p as f64, grad)
}

fn check_target(k: usize, h: usize, w: usize, target: &SegMap) -> Result<()> {
    if target.height != h || target.width != w {
        return Err(Error::shape("cross-entropy target", (h, w), (target.height, target.width)));
    }
    if let Some(&l) = target.labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::LabelOutOfRange { label: l, k });
    }
    Ok(())
}

/// Mean over pixels of `−ln p[target]`.
pub fn ce_loss<T: Real>(pm: &ProbMap<T>, target: &SegMap) -> Result<f64> {
    check_target(pm.k, pm.height, pm.width, target)?;
    let p = pm.pixels();
    let total: f64 = target
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -pm.probs[l as usize * p + i].as_f64().max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / p as f64)
}

/// Cross-entropy from logits (log-sum-exp form) and its gradient
/// `(softmax − onehot)·weight/P`.
pub(crate) fn ce_with_grad<T: Real>(
    logits: &FeatureMap<T>,
    target: &SegMap,
    weight: f64,
) -> Result<(f64, FeatureMap<T>)> {
    let (k, p) = (logits.channels, logits.plane_len());
    check_target(k, logits.height, logits.width, target)?;
    let scale = weight / p as f64;
    let mut grad = FeatureMap::zeros(k, logits.height, logits.width);
    let mut total = 0.0;
    for i in 0..p {
        let z = |c: usize| logits.data[c * p + i].as_f64();
        let m = (0..k).map(z).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..k).map(|c| (z(c) - m).exp()).sum();
        let lse = m + s.ln();
        let t = target.labels[i] as usize;
        total += lse - z(t);
        for c in 0..k {
            let pc = (z(c) - lse).exp();
            let g = if c == t { pc - 1.0 } else { pc };
            grad.data[c * p + i] = T::from_f64_lossy(scale * g);
        }
    }
    Ok((total / p as f64, grad))
}

/// Nearest-neighbour subsampling at stride `factor`, anchored at (0, 0).
/// Output size is `⌈H/factor⌉×⌈W/factor⌉`, matching the head resolution for
/// `factor = 4`.
pub fn downsample_labels(seg: &SegMap, factor: usize) -> Result<SegMap> {
    if factor == 0 {
        return Err(Error::param("downsample factor must be >= 1"));
    }
    let h = seg.height.div_ceil(factor);
    let w = seg.width.div_ceil(factor);
    let labels = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| seg.at(y * factor, x * factor))
        .collect();
    Ok(SegMap {
        height: h,
        width: w,
        num_classes: seg.num_classes,
        labels,
    })
}
