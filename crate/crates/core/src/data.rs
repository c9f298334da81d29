//! Images, label maps, corpora and the stochastic data operations that feed
//! training: the procedural shapes corpus, image-folder ingestion, additive
//! Gaussian noise, aligned patch sampling and label permutations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, tag, Rng};
use crate::tensor::{FeatureMap, Real};

/// A planar (`C×H×W`) image. Clean images lie in `[0, 1]`; noisy and
/// denoised images may leave that range.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::param(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image data",
                channels * height * width,
                data.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn clipped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        assert!(top + h <= self.height && left + w <= self.width);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Image {
            channels: self.channels,
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_feature_map<T: Real>(&self) -> FeatureMap<T> {
        FeatureMap::from_vec(
            self.channels,
            self.height,
            self.width,
            self.data
                .iter()
                .map(|&v| T::from_f64_lossy(f64::from(v)))
                .collect(),
        )
    }

    pub fn from_feature_map<T: Real>(map: &FeatureMap<T>) -> Image {
        Image {
            channels: map.channels,
            height: map.height,
            width: map.width,
            data: map.data.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    /// Luminance plane (0.299, 0.587, 0.114) as `f64`, row-major.
    pub fn luma(&self) -> Vec<f64> {
        let n = self.height * self.width;
        if self.channels == 1 {
            return self.data.iter().map(|&v| f64::from(v)).collect();
        }
        (0..n)
            .map(|i| {
                0.299 * f64::from(self.data[i])
                    + 0.587 * f64::from(self.data[n + i])
                    + 0.114 * f64::from(self.data[2 * n + i])
            })
            .collect()
    }
}

/// Per-pixel class ids in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<u32>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("segmap labels", height * width, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                k: num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn constant(height: usize, width: usize, num_classes: usize, label: u32) -> Self {
        Self {
            height,
            width,
            num_classes,
            labels: vec![label; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> SegMap {
        assert!(top + h <= self.height && left + w <= self.width);
        let labels = (top..top + h)
            .flat_map(|y| self.labels[y * self.width + left..y * self.width + left + w].iter())
            .copied()
            .collect();
        SegMap {
            height: h,
            width: w,
            num_classes: self.num_classes,
            labels,
        }
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Synthetic { seed: u64 },
    Folder { path: PathBuf, skipped: usize },
    Derived { from: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub name: String,
    pub image: Image,
    pub labels: Option<SegMap>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
    pub k_classes: Option<usize>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|it| it.labels.is_some())
    }

    /// Tags the first `n_train` items as train, the next `n_val` as val, and
    /// the remainder as test.
    pub fn assign_splits(&mut self, n_train: usize, n_val: usize) {
        for (i, item) in self.items.iter_mut().enumerate() {
            item.split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }

    pub fn subset(&self, split: Split) -> Corpus {
        Corpus {
            items: self
                .items
                .iter()
                .filter(|it| it.split == split)
                .cloned()
                .collect(),
            k_classes: self.k_classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn take(&self, n: usize) -> Corpus {
        Corpus {
            items: self.items.iter().take(n).cloned().collect(),
            k_classes: self.k_classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Checks the corpus invariants: shared K across labeled items, labels in
    /// range, label maps aligned with their images.
    pub fn validate(&self) -> Result<()> {
        for item in &self.items {
            if let Some(seg) = &item.labels {
                if Some(seg.num_classes) != self.k_classes {
                    return Err(Error::param(format!(
                        "item {} has K={} but corpus K={:?}",
                        item.name, seg.num_classes, self.k_classes
                    )));
                }
                if seg.height != item.image.height || seg.width != item.image.width {
                    return Err(Error::shape(
                        format!("labels of {}", item.name),
                        (item.image.height, item.image.width),
                        (seg.height, seg.width),
                    ));
                }
                if let Some(&l) = seg.labels.iter().find(|&&l| l as usize >= seg.num_classes) {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        k: seg.num_classes,
                    });
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shapes corpus

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Rect,
    Disk,
    Triangle,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Characteristic colour of a foreground class (class ids start at 1).
pub fn class_color(class: usize) -> [f32; 3] {
    let i = class.saturating_sub(1) as f32;
    let hue = (i * 0.618_034).fract();
    // kept away from 0 and 1 so additive noise is rarely clipped
    let value = if class % 2 == 0 { 0.85 } else { 0.65 };
    hsv_to_rgb(hue, 0.7, value)
}

fn smooth_background(rng: &mut Rng, h: usize, w: usize) -> Image {
    const GRID: usize = 5;
    let base: f32 = rng.random_range(0.35..0.6);
    let mut img = Image::filled(3, h, w, 0.0);
    for c in 0..3 {
        let tint: f32 = rng.random_range(-0.05..0.05);
        let coarse: Vec<f32> = (0..GRID * GRID)
            .map(|_| rng.random_range(-0.12..0.12))
            .collect();
        for y in 0..h {
            let gy = y as f32 / (h.max(2) - 1) as f32 * (GRID - 1) as f32;
            let y0 = (gy.floor() as usize).min(GRID - 2);
            let fy = gy - y0 as f32;
            for x in 0..w {
                let gx = x as f32 / (w.max(2) - 1) as f32 * (GRID - 1) as f32;
                let x0 = (gx.floor() as usize).min(GRID - 2);
                let fx = gx - x0 as f32;
                let v00 = coarse[y0 * GRID + x0];
                let v01 = coarse[y0 * GRID + x0 + 1];
                let v10 = coarse[(y0 + 1) * GRID + x0];
                let v11 = coarse[(y0 + 1) * GRID + x0 + 1];
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                img.set(c, y, x, (base + tint + v).clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn inside(kind: ShapeKind, geom: &[f32; 6], y: f32, x: f32) -> bool {
    match kind {
        ShapeKind::Rect => y >= geom[0] && y <= geom[1] && x >= geom[2] && x <= geom[3],
        ShapeKind::Disk => {
            let (dy, dx) = (y - geom[0], x - geom[1]);
            dy * dy + dx * dx <= geom[2] * geom[2]
        }
        ShapeKind::Triangle => {
            let (ay, ax, by, bx, cy, cx) = (geom[0], geom[1], geom[2], geom[3], geom[4], geom[5]);
            let d1 = (x - bx) * (ay - by) - (ax - bx) * (y - by);
            let d2 = (x - cx) * (by - cy) - (bx - cx) * (y - cy);
            let d3 = (x - ax) * (cy - ay) - (cx - ax) * (y - ay);
            let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(neg && pos)
        }
    }
}

fn render_shapes_image(rng: &mut Rng, h: usize, w: usize, k: usize) -> (Image, SegMap) {
    let min_area = ((h * w) / 400).max(4);
    let short = h.min(w) as f32;
    loop {
        let mut img = smooth_background(rng, h, w);
        let mut seg = SegMap::constant(h, w, k, 0);
        for class in 1..k {
            let kind = match (class - 1) % 3 {
                0 => ShapeKind::Rect,
                1 => ShapeKind::Disk,
                _ => ShapeKind::Triangle,
            };
            let r = rng.random_range(short * 0.12..short * 0.24);
            let cy = rng.random_range(0.0..h as f32);
            let cx = rng.random_range(0.0..w as f32);
            let geom = match kind {
                ShapeKind::Rect => {
                    let hh = r * rng.random_range(0.6..1.0);
                    let hw = r * rng.random_range(0.6..1.0);
                    [cy - hh, cy + hh, cx - hw, cx + hw, 0.0, 0.0]
                }
                ShapeKind::Disk => [cy, cx, r, 0.0, 0.0, 0.0],
                ShapeKind::Triangle => {
                    let t0: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                    let step = std::f32::consts::TAU / 3.0;
                    let rr = r * 1.3;
                    [
                        cy + rr * t0.sin(),
                        cx + rr * t0.cos(),
                        cy + rr * (t0 + step).sin(),
                        cx + rr * (t0 + step).cos(),
                        cy + rr * (t0 + 2.0 * step).sin(),
                        cx + rr * (t0 + 2.0 * step).cos(),
                    ]
                }
            };
            let base = class_color(class);
            let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
            // mild linear shading so shapes are not perfectly flat
            let gy: f32 = rng.random_range(-0.08..0.08);
            let gx: f32 = rng.random_range(-0.08..0.08);
            for y in 0..h {
                for x in 0..w {
                    let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                    if !inside(kind, &geom, py, px) {
                        continue;
                    }
                    seg.labels[y * w + x] = class as u32;
                    let shade = gy * (py - cy) / r + gx * (px - cx) / r;
                    for c in 0..3 {
                        img.set(c, y, x, (base[c] + jitter[c] + shade).clamp(0.0, 1.0));
                    }
                }
            }
        }
        if seg.histogram().iter().all(|&n| n >= min_area) {
            return (img, seg);
        }
    }
}

/// Procedural labeled corpus: each image holds one shape per foreground class
/// (`k_classes − 1` shapes) over a smooth textured background (class 0).
pub fn generate_shapes_corpus(
    n_images: usize,
    size: (usize, usize),
    k_classes: usize,
    seed: u64,
) -> Result<Corpus> {
    let (h, w) = size;
    if k_classes < 2 || k_classes > 256 {
        return Err(Error::param(format!("k_classes must be in [2, 256], got {k_classes}")));
    }
    if h < 16 || w < 16 {
        return Err(Error::param(format!("image size must be at least 16x16, got {h}x{w}")));
    }
    if n_images == 0 {
        return Err(Error::param("n_images must be at least 1"));
    }
    let items = (0..n_images)
        .map(|i| {
            let mut rng = rng_from(seed, &[tag("shapes"), i as u64]);
            let (image, labels) = render_shapes_image(&mut rng, h, w, k_classes);
            CorpusItem {
                name: format!("{i:04}"),
                image,
                labels: Some(labels),
                split: Split::Train,
            }
        })
        .collect();
    Ok(Corpus {
        items,
        k_classes: Some(k_classes),
        provenance: Provenance::Synthetic { seed },
    })
}

// ---------------------------------------------------------------------------
// Image I/O

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

pub fn decode_image(path: &Path) -> Result<Image> {
    let dynamic = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let sixteen = matches!(
        dynamic.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    let gray = !dynamic.color().has_color();
    let channels = if gray { 1 } else { 3 };
    let interleaved: Vec<f32> = match (gray, sixteen) {
        (true, false) => dynamic.to_luma8().into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
        (true, true) => dynamic.to_luma16().into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect(),
        (false, false) => dynamic.to_rgb8().into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
        (false, true) => dynamic.to_rgb16().into_raw().into_iter().map(|v| f32::from(v) / 65535.0).collect(),
    };
    let mut data = vec![0.0; interleaved.len()];
    for (i, px) in interleaved.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * h * w + i] = v;
        }
    }
    Image::new(channels, h, w, data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_image(img: &Image, path: &Path) -> Result<()> {
    let n = img.height * img.width;
    let (w, h) = (img.width as u32, img.height as u32);
    let result = if img.channels == 1 {
        let buf: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
        image::GrayImage::from_raw(w, h, buf)
            .expect("buffer size")
            .save(path)
    } else {
        let mut buf = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                buf.push(quantize(img.data[c * n + i]));
            }
        }
        image::RgbImage::from_raw(w, h, buf)
            .expect("buffer size")
            .save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn encode_labels(seg: &SegMap, path: &Path) -> Result<()> {
    let buf: Vec<u8> = seg.labels.iter().map(|&l| l as u8).collect();
    image::GrayImage::from_raw(seg.width as u32, seg.height as u32, buf)
        .expect("buffer size")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn sorted_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Loads every PNG/PPM/PGM in `path` (lexicographic filename order) as an
/// unlabeled corpus. Undecodable files are skipped and counted.
pub fn load_image_folder(path: impl AsRef<Path>) -> Result<Corpus> {
    let dir = path.as_ref();
    let mut items = Vec::new();
    let mut skipped = 0;
    for file in sorted_image_files(dir)? {
        match decode_image(&file) {
            Ok(image) => items.push(CorpusItem {
                name: file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                image,
                labels: None,
                split: Split::Train,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                skipped += 1;
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no decodable images in {} ({skipped} skipped)",
            dir.display()
        )));
    }
    Ok(Corpus {
        items,
        k_classes: None,
        provenance: Provenance::Folder {
            path: dir.to_path_buf(),
            skipped,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    k_classes: Option<usize>,
    seed: Option<u64>,
    split: Vec<Split>,
}

/// Writes `images/NNNN.png`, `labels/NNNN.png` (class ids as 8-bit gray) and
/// `meta.json`.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    if corpus.k_classes.map_or(false, |k| k > 256) {
        return Err(Error::param("labels PNG supports at most 256 classes"));
    }
    for (i, item) in corpus.items.iter().enumerate() {
        encode_image(&item.image, &images.join(format!("{i:04}.png")))?;
        if let Some(seg) = &item.labels {
            fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
            encode_labels(seg, &labels.join(format!("{i:04}.png")))?;
        }
    }
    let meta = CorpusMeta {
        k_classes: corpus.k_classes,
        seed: match corpus.provenance {
            Provenance::Synthetic { seed } => Some(seed),
            _ => None,
        },
        split: corpus.items.iter().map(|it| it.split).collect(),
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

/// Reads a directory written by [`save_corpus`]. Falls back to
/// [`load_image_folder`] when there is no `meta.json`.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return load_image_folder(dir);
    }
    let meta: CorpusMeta = serde_json::from_slice(
        &fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;
    let mut corpus = load_image_folder(dir.join("images"))?;
    if corpus.items.len() != meta.split.len() {
        return Err(Error::param(format!(
            "meta.json lists {} items, found {} images",
            meta.split.len(),
            corpus.items.len()
        )));
    }
    corpus.k_classes = meta.k_classes;
    if let Some(seed) = meta.seed {
        corpus.provenance = Provenance::Synthetic { seed };
    }
    for (item, split) in corpus.items.iter_mut().zip(&meta.split) {
        item.split = *split;
        if let Some(k) = meta.k_classes {
            let path = dir.join("labels").join(format!("{}.png", item.name));
            if path.exists() {
                let gray = image::open(&path)
                    .map_err(|source| Error::Image {
                        path: path.clone(),
                        source,
                    })?
                    .to_luma8();
                let seg = SegMap::new(
                    gray.height() as usize,
                    gray.width() as usize,
                    k,
                    gray.into_raw().into_iter().map(u32::from).collect(),
                )?;
                item.labels = Some(seg);
            }
        }
    }
    corpus.validate()?;
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// Noise, patches, permutations

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub clean: Image,
    pub noisy: Image,
    /// Standard deviation on the 0–255 scale.
    pub sigma: f64,
    pub seed: u64,
}

/// `noisy = clean + ε`, `ε ~ N(0, (sigma/255)²)` i.i.d.; not clipped.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<NoisySample> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let std = sigma / 255.0;
    let mut rng = rng_from(seed, &[tag("noise")]);
    let noisy = if sigma == 0.0 {
        img.clone()
    } else {
        Image {
            data: img
                .data
                .iter()
                .map(|&v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (f64::from(v) + std * e) as f32
                })
                .collect(),
            ..img.clone()
        }
    };
    Ok(NoisySample {
        clean: img.clone(),
        noisy,
        sigma,
        seed,
    })
}

/// An aligned crop of a corpus item.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Image,
    pub labels: Option<SegMap>,
    pub source: usize,
    pub top: usize,
    pub left: usize,
}

/// Draws `count` patches with top-left corners uniform over every valid
/// stride-1 position of every item.
pub fn sample_patches(corpus: &Corpus, patch: usize, count: usize, seed: u64) -> Result<Vec<Patch>> {
    if patch == 0 {
        return Err(Error::param("patch size must be positive"));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("cannot sample patches".into()));
    }
    let mut cumulative = Vec::with_capacity(corpus.len());
    let mut total = 0u64;
    for (index, item) in corpus.items.iter().enumerate() {
        let (h, w) = (item.image.height, item.image.width);
        if patch > h || patch > w {
            return Err(Error::PatchTooLarge {
                patch,
                index,
                height: h,
                width: w,
            });
        }
        total += ((h - patch + 1) * (w - patch + 1)) as u64;
        cumulative.push(total);
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = rng_from(seed, &[tag("patch"), i as u64]);
            let u = rng.random_range(0..total);
            let source = cumulative.partition_point(|&c| c <= u);
            let offset = u - if source == 0 { 0 } else { cumulative[source - 1] };
            let item = &corpus.items[source];
            let cols = (item.image.width - patch + 1) as u64;
            let (top, left) = ((offset / cols) as usize, (offset % cols) as usize);
            Patch {
                image: item.image.crop(top, left, patch, patch),
                labels: item.labels.as_ref().map(|s| s.crop(top, left, patch, patch)),
                source,
                top,
                left,
            }
        })
        .collect())
}

/// Result of a quadrant permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPermutation {
    pub map: SegMap,
    /// Output quadrant `q` (row-major: TL, TR, BL, BR) holds source quadrant
    /// `order[q]`.
    pub order: [usize; 4],
    /// Set when an odd height or width was cropped by one to make it even.
    pub cropped: bool,
}

/// Cuts the map into four equal quadrants and permutes their locations
/// uniformly over the 24 arrangements.
pub fn permute_blocks(seg: &SegMap, seed: u64) -> BlockPermutation {
    let h = seg.height - seg.height % 2;
    let w = seg.width - seg.width % 2;
    let cropped = h != seg.height || w != seg.width;
    let src = seg.crop(0, 0, h, w);
    let mut order = [0usize, 1, 2, 3];
    let mut rng = rng_from(seed, &[tag("permute_blocks")]);
    order.shuffle(&mut rng);
    let (hh, hw) = (h / 2, w / 2);
    let mut labels = vec![0u32; h * w];
    for q in 0..4 {
        let (dy, dx) = ((q / 2) * hh, (q % 2) * hw);
        let (sy, sx) = ((order[q] / 2) * hh, (order[q] % 2) * hw);
        for y in 0..hh {
            for x in 0..hw {
                labels[(dy + y) * w + dx + x] = src.labels[(sy + y) * w + sx + x];
            }
        }
    }
    BlockPermutation {
        map: SegMap {
            height: h,
            width: w,
            num_classes: seg.num_classes,
            labels,
        },
        order,
        cropped,
    }
}

/// Uniformly shuffles all pixel locations.
pub fn permute_pixels(seg: &SegMap, seed: u64) -> SegMap {
    let mut labels = seg.labels.clone();
    let mut rng = rng_from(seed, &[tag("permute_pixels")]);
    labels.shuffle(&mut rng);
    SegMap {
        labels,
        ..seg.clone()
    }
}
