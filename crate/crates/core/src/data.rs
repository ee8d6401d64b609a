//! Synthetic quality dataset, scene-disjoint splits and the on-disk archive.
//!
//! # Archive layout
//!
//! A dataset directory holds `manifest.csv` and one blob per image.
//!
//! `manifest.csv` has the header `filename,label,scene_id,distortion,level`.
//! `filename` is relative to the directory. Only the first three columns are
//! required when ingesting external data. Files ending in `.bin` are raw
//! blobs. Anything else is decoded as an image (PNG).
//!
//! A blob is three little-endian `u32` values `C, H, W` followed by `C·H·W`
//! little-endian `f64` pixels in row-major `[C, H, W]` order.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cprl_autodiff::Tensor;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CprlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    Reference,
    Blur,
    Noise,
    Quantize,
}

impl Distortion {
    pub const APPLIED: [Distortion; 3] =
        [Distortion::Blur, Distortion::Noise, Distortion::Quantize];

    pub fn as_str(self) -> &'static str {
        match self {
            Distortion::Reference => "reference",
            Distortion::Blur => "blur",
            Distortion::Noise => "noise",
            Distortion::Quantize => "quantize",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Self::Reference, Self::Blur, Self::Noise, Self::Quantize]
            .into_iter()
            .find(|d| d.as_str() == s)
    }

    /// Label decay rate per level.
    pub fn kappa(self) -> f64 {
        match self {
            Distortion::Reference => 0.0,
            Distortion::Blur => 0.45,
            Distortion::Noise => 0.6,
            Distortion::Quantize => 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: f64,
    pub scene_id: u32,
    pub distortion: Distortion,
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.image.shape();
            if shape.len() != 3 {
                return Err(CprlError::Data(format!(
                    "images must be [C, H, W], got {shape:?}"
                )));
            }
            if let Some(bad) = samples.iter().find(|s| s.image.shape() != shape) {
                return Err(CprlError::Data(format!(
                    "mixed image shapes {shape:?} and {:?}",
                    bad.image.shape()
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn scene_ids(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.scene_id).collect()
    }

    /// Stacks the selected samples into `[n, C, H, W]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::stack(&images)?, labels))
    }

    /// Every sample, in order.
    pub fn all(&self) -> Result<(Tensor, Vec<f64>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    fn filter_scenes(&self, keep: &BTreeSet<u32>) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(&s.scene_id))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub scenes: usize,
    /// Levels per distortion type including level 0 (the reference).
    pub levels: usize,
    pub image_size: usize,
    /// Standard deviation of seeded gaussian label jitter; 0 disables it.
    pub label_noise: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            scenes: 40,
            levels: 5,
            image_size: 32,
            label_noise: 0.0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes < 5 {
            return Err(CprlError::InvalidArgument(format!(
                "need at least 5 scenes, got {}",
                self.scenes
            )));
        }
        if self.levels < 3 {
            return Err(CprlError::InvalidArgument(format!(
                "need at least 3 levels, got {}",
                self.levels
            )));
        }
        if self.image_size < 4 {
            return Err(CprlError::InvalidArgument(format!(
                "image size {} is too small",
                self.image_size
            )));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return Err(CprlError::InvalidArgument(
                "label noise must be a finite non-negative value".into(),
            ));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(a)) ^ b)
}

/// Quality label for `level` out of `levels`: `exp(-κ·l)` rescaled so that
/// level 0 maps to 1 and the last level to 0.
pub fn level_label(distortion: Distortion, level: usize, levels: usize) -> f64 {
    if level == 0 {
        return 1.0;
    }
    let k = distortion.kappa();
    let last = (-k * (levels - 1) as f64).exp();
    ((-k * level as f64).exp() - last) / (1.0 - last)
}

/// Reference scene: a seeded mixture of a linear gradient, a checkerboard
/// and a sum of low-frequency sinusoids, stretched to `[0.05, 0.95]`.
pub fn render_scene(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let period = [2usize, 4, 8][rng.random_range(0..3)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let fx = rng.random_range(-4i32..=4) as f64;
            let fy = rng.random_range(1i32..=4) as f64;
            let amp = rng.random_range(0.2..1.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (fx, fy, amp, phase)
        })
        .collect();
    let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..1.0)).collect();
    let s = size as f64;
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 / s, j as f64 / s);
            let grad = theta.cos() * (x - 0.5) + theta.sin() * (y - 0.5);
            let check = ((i / period + j / period) % 2) as f64;
            let noise: f64 = waves
                .iter()
                .map(|&(fx, fy, a, p)| a * (std::f64::consts::TAU * (fx * x + fy * y) + p).cos())
                .sum();
            data.push(w[0] * grad + w[1] * check + w[2] * noise / 3.0);
        }
    }
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in &mut data {
        *v = 0.05 + 0.9 * (*v - lo) / span;
    }
    Tensor::new(vec![1, size, size], data).expect("size matches")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                tmp[base + i * w + j] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| {
                        let jj = (j as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                        kv * src[base + i * w + jj]
                    })
                    .sum();
            }
        }
        for i in 0..h {
            for j in 0..w {
                out[base + i * w + j] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| {
                        let ii = (i as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
                        kv * tmp[base + ii * w + j]
                    })
                    .sum();
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Applies `distortion` at `level` to a reference image; level 0 returns
/// the reference unchanged.
pub fn distort(
    reference: &Tensor,
    distortion: Distortion,
    level: usize,
    levels: usize,
    seed: u64,
) -> Tensor {
    if level == 0 {
        return reference.clone();
    }
    let frac = level as f64 / (levels - 1) as f64;
    match distortion {
        Distortion::Reference => reference.clone(),
        Distortion::Blur => gaussian_blur(reference, 0.6 * level as f64),
        Distortion::Noise => {
            let normal = Normal::new(0.0, 0.12 * frac).expect("finite std");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut noisy = reference.clone();
            for v in noisy.data_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
            noisy
        }
        Distortion::Quantize => {
            let steps = (2.0 * 128f64.powf(1.0 - frac)).round().max(2.0) - 1.0;
            reference.map(|v| (v * steps).round() / steps)
        }
    }
}

/// One scene: the reference followed by every (type, level) distortion.
fn scene_samples(cfg: &GenerateConfig, seed: u64, scene: u32) -> Vec<Sample> {
    let scene_seed = derive_seed(seed, scene as u64, 0);
    let reference = render_scene(cfg.image_size, scene_seed);
    let mut label_rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, u64::MAX, 1));
    let jitter = Normal::new(0.0, cfg.label_noise.max(0.0)).expect("validated");
    let mut label = |exact: f64| {
        if cfg.label_noise > 0.0 {
            (exact + jitter.sample(&mut label_rng)).clamp(0.0, 1.0)
        } else {
            exact
        }
    };
    let mut out = vec![Sample {
        image: reference.clone(),
        label: label(1.0),
        scene_id: scene,
        distortion: Distortion::Reference,
        level: 0,
    }];
    for (t, d) in Distortion::APPLIED.into_iter().enumerate() {
        for level in 1..cfg.levels {
            let noise_seed = derive_seed(scene_seed, t as u64 + 1, level as u64);
            out.push(Sample {
                image: distort(&reference, d, level, cfg.levels, noise_seed),
                label: label(level_label(d, level, cfg.levels)),
                scene_id: scene,
                distortion: d,
                level: level as u32,
            });
        }
    }
    out
}

/// Deterministic synthetic dataset; scenes are rendered in parallel from
/// per-scene derived seeds and concatenated in scene order.
pub fn generate(cfg: &GenerateConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let per_scene: Vec<Vec<Sample>> = (0..cfg.scenes as u32)
        .into_par_iter()
        .map(|s| scene_samples(cfg, seed, s))
        .collect();
    Dataset::new(per_scene.into_iter().flatten().collect())
}

/// Train/test assignment by scene id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_scenes: Vec<u32>,
    pub test_scenes: Vec<u32>,
}

impl SplitSpec {
    /// Shuffles the scene ids and holds out a fifth of them (at least one).
    pub fn new(dataset: &Dataset, seed: u64) -> Result<Self> {
        let mut scenes: Vec<u32> = dataset.scene_ids().into_iter().collect();
        if scenes.len() < 5 {
            return Err(CprlError::Data(format!(
                "a 4:1 scene split needs at least 5 scenes, got {}",
                scenes.len()
            )));
        }
        scenes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((scenes.len() as f64) / 5.0).round().max(1.0) as usize;
        let mut test_scenes = scenes[..n_test].to_vec();
        let mut train_scenes = scenes[n_test..].to_vec();
        test_scenes.sort_unstable();
        train_scenes.sort_unstable();
        Ok(Self {
            seed,
            train_scenes,
            test_scenes,
        })
    }

    /// Splits `dataset`; every scene must be assigned to exactly one side.
    pub fn apply(&self, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
        let train: BTreeSet<u32> = self.train_scenes.iter().copied().collect();
        let test: BTreeSet<u32> = self.test_scenes.iter().copied().collect();
        if let Some(s) = train.intersection(&test).next() {
            return Err(CprlError::Data(format!("scene {s} is in both splits")));
        }
        if let Some(s) = dataset
            .scene_ids()
            .into_iter()
            .find(|s| !train.contains(s) && !test.contains(s))
        {
            return Err(CprlError::Data(format!(
                "scene {s} is not assigned by the split"
            )));
        }
        let (tr, te) = (dataset.filter_scenes(&train), dataset.filter_scenes(&test));
        if tr.is_empty() || te.is_empty() {
            return Err(CprlError::Data("split leaves one side empty".into()));
        }
        Ok((tr, te))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CprlError::Data(format!("{}: {e}", path.display())))
    }
}

pub const MANIFEST: &str = "manifest.csv";

fn blob_name(s: &Sample) -> String {
    format!(
        "images/scene{:04}_{}_{}.bin",
        s.scene_id,
        s.distortion.as_str(),
        s.level
    )
}

pub fn encode_blob(image: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * image.len());
    for d in image.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 12 {
        return Err("blob shorter than its 12-byte header".into());
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize
    };
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    if n == 0 || bytes.len() != 12 + 8 * n {
        return Err(format!(
            "blob of shape {shape:?} needs {} bytes, found {}",
            12 + 8 * n,
            bytes.len()
        ));
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

/// Writes the archive described in the module docs.
pub fn export(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(dir.join(MANIFEST))?));
    w.write_record(["filename", "label", "scene_id", "distortion", "level"])?;
    for s in &dataset.samples {
        let name = blob_name(s);
        fs::write(dir.join(&name), encode_blob(&s.image))?;
        w.write_record([
            name,
            s.label.to_string(),
            s.scene_id.to_string(),
            s.distortion.as_str().to_string(),
            s.level.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    pub image_size: usize,
    pub channels: usize,
    /// Inclusive range raw labels must fall in before normalization.
    pub label_range: [f64; 2],
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            label_range: [0.0, 1.0],
        }
    }
}

fn resize_crop(img: &Tensor, size: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h == size && w == size {
        return img.clone();
    }
    let scale = size as f64 / h.min(w) as f64;
    let (nh, nw) = (
        ((h as f64 * scale).round() as u32).max(size as u32),
        ((w as f64 * scale).round() as u32).max(size as u32),
    );
    let (top, left) = ((nh - size as u32) / 2, (nw - size as u32) / 2);
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane: Vec<f32> = img.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|&v| v as f32)
            .collect();
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, plane).expect("plane length matches");
        let resized = imageops::resize(&buf, nw, nh, FilterType::Triangle);
        let cropped = imageops::crop_imm(&resized, left, top, size as u32, size as u32).to_image();
        out.extend(
            cropped
                .into_raw()
                .into_iter()
                .map(|v| (v as f64).clamp(0.0, 1.0)),
        );
    }
    Tensor::new(vec![c, size, size], out).expect("sizes match")
}

fn decode_image(path: &Path, channels: usize) -> std::result::Result<Tensor, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            let g = img.to_luma32f();
            Tensor::new(
                vec![1, h, w],
                g.into_raw().into_iter().map(f64::from).collect(),
            )
            .map_err(|e| e.to_string())
        }
        3 => {
            let rgb: ImageBuffer<Rgb<f32>, Vec<f32>> = img.to_rgb32f();
            let raw = rgb.into_raw();
            let mut planar = vec![0.0; 3 * h * w];
            for (p, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[c * h * w + p] = px[c] as f64;
                }
            }
            Tensor::new(vec![3, h, w], planar).map_err(|e| e.to_string())
        }
        n => Err(format!("decoded images support 1 or 3 channels, not {n}")),
    }
}

/// Reads a dataset directory. Images are resized so the shorter side equals
/// `image_size` and center-cropped; labels are min-max normalized to `[0, 1]`.
pub fn ingest(dir: &Path, opts: &IngestOptions) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST);
    let row_err = |line: u64, reason: String| CprlError::Manifest {
        path: manifest.clone(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(&manifest)
        .map_err(|e| row_err(0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| row_err(1, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (fcol, lcol, scol) = match (col("filename"), col("label"), col("scene_id")) {
        (Some(f), Some(l), Some(s)) => (f, l, s),
        _ => {
            return Err(row_err(
                1,
                "header must name filename, label and scene_id".into(),
            ))
        }
    };
    let (dcol, vcol) = (col("distortion"), col("level"));
    let [lo, hi] = opts.label_range;

    let mut rows: Vec<(u64, PathBuf, f64, u32, Distortion, u32)> = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| row_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| {
            record
                .get(i)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| row_err(line, format!("missing {name}")))
        };
        let filename = field(fcol, "filename")?;
        let label: f64 = field(lcol, "label")?.parse().map_err(|_| {
            row_err(
                line,
                format!("label {:?} is not a number", record.get(lcol).unwrap_or("")),
            )
        })?;
        if !label.is_finite() || label < lo || label > hi {
            return Err(row_err(
                line,
                format!("label {label} outside declared range [{lo}, {hi}]"),
            ));
        }
        let scene: u32 = field(scol, "scene_id")?
            .parse()
            .map_err(|_| row_err(line, "scene_id must be a non-negative integer".into()))?;
        let distortion = match dcol
            .and_then(|i| record.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
        {
            None => Distortion::Reference,
            Some(s) => Distortion::parse(s)
                .ok_or_else(|| row_err(line, format!("unknown distortion {s:?}")))?,
        };
        let level = match vcol
            .and_then(|i| record.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
        {
            None => 0,
            Some(s) => s
                .parse()
                .map_err(|_| row_err(line, format!("level {s:?} is not an integer")))?,
        };
        let path = dir.join(filename);
        if !path.is_file() {
            return Err(row_err(line, format!("missing file {}", path.display())));
        }
        rows.push((line, path, label, scene, distortion, level));
    }
    if rows.is_empty() {
        return Err(CprlError::Data(format!(
            "{} lists no samples",
            manifest.display()
        )));
    }

    let label_lo = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let label_hi = rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    if label_hi == label_lo && rows.len() > 1 {
        return Err(CprlError::Data(format!(
            "every label equals {label_lo}; min-max normalization is undefined"
        )));
    }

    let samples = rows
        .into_par_iter()
        .map(|(line, path, label, scene_id, distortion, level)| {
            let raw = if path.extension().is_some_and(|e| e == "bin") {
                fs::read(&path)
                    .map_err(|e| e.to_string())
                    .and_then(|b| decode_blob(&b))
            } else {
                decode_image(&path, opts.channels)
            }
            .map_err(|e| row_err(line, format!("{}: {e}", path.display())))?;
            if raw.shape()[0] != opts.channels {
                return Err(row_err(
                    line,
                    format!(
                        "image has {} channels, expected {}",
                        raw.shape()[0],
                        opts.channels
                    ),
                ));
            }
            if raw.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(row_err(line, "pixel values must lie in [0, 1]".into()));
            }
            let label = if label_hi > label_lo {
                (label - label_lo) / (label_hi - label_lo)
            } else {
                1.0
            };
            Ok(Sample {
                image: resize_crop(&raw, opts.image_size),
                label,
                scene_id,
                distortion,
                level,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

/// Convenience for tests and tools: writes one manifest row per entry.
pub fn write_manifest(dir: &Path, rows: &[(&str, &str, &str)]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    writeln!(f, "filename,label,scene_id")?;
    for (a, b, c) in rows {
        writeln!(f, "{a},{b},{c}")?;
    }
    f.flush()?;
    Ok(())
}
