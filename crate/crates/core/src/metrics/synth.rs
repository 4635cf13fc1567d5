//! Synthetic segmentation datasets and their on-disk form.
//!
//! `blob` samples hold one smooth, roughly centred region (stable position,
//! smooth boundary); `vessel` samples hold a few thin curvilinear strokes.
//! Every sample draws from its own ChaCha stream, so datasets are
//! bit-identical per seed and any prefix of a larger dataset equals the
//! smaller one.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TensorShape;
use crate::io::parse_json;
use crate::raster::GrayImage;
use crate::tensor::Tensor;

use super::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Blob,
    Vessel,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blob" => Ok(SynthKind::Blob),
            "vessel" => Ok(SynthKind::Vessel),
            other => Err(Error::InvalidArgument(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Multiplicative speckle amplitude.
    #[serde(default = "default_speckle")]
    pub speckle: f32,
    /// Number of 3x3 box-blur passes applied before speckle.
    #[serde(default = "default_blur")]
    pub blur_passes: usize,
}

fn default_speckle() -> f32 {
    0.25
}

fn default_blur() -> usize {
    2
}

impl SynthSpec {
    pub fn new(kind: SynthKind, count: usize, size: usize, seed: u64) -> Self {
        SynthSpec {
            kind,
            count,
            size,
            seed,
            speckle: default_speckle(),
            blur_passes: default_blur(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::InvalidArgument(format!("image size must be >= 32, got {}", self.size)));
        }
        if self.count == 0 {
            return Err(Error::InvalidArgument("dataset must hold at least one sample".into()));
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return Err(Error::InvalidArgument("speckle must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn coverage_bounds(&self) -> (f64, f64) {
        match self.kind {
            SynthKind::Blob => (0.05, 0.5),
            SynthKind::Vessel => (0.01, 0.15),
        }
    }
}

/// One single-channel image (values in [0, 1], 8-bit quantised) and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.samples.len());
        (
            Dataset { samples: self.samples[..n].to_vec() },
            Dataset { samples: self.samples[n..].to_vec() },
        )
    }

    /// Stacks the samples at `indices` into an image batch and a flat target.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<f32>)> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let x = Tensor::stack(&images)?;
        let y = indices
            .iter()
            .flat_map(|&i| self.samples[i].mask.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }))
            .collect();
        Ok((x, y))
    }

    pub fn save(&self, dir: impl AsRef<Path>, spec: Option<&SynthSpec>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let image = format!("image_{i:05}.pgm");
            let mask = format!("mask_{i:05}.pbm");
            let pixels = s.image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            GrayImage::new(s.image.shape.w, s.image.shape.h, pixels)?.write_pgm(dir.join(&image))?;
            s.mask.write_pbm(dir.join(&mask))?;
            entries.push(IndexEntry { image, mask });
        }
        let index = DatasetIndex {
            schema: "segprune.dataset/v1".into(),
            spec: spec.cloned(),
            samples: entries,
        };
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let index: DatasetIndex = parse_json(&dir.join("index.json"))?;
        let mut samples = Vec::with_capacity(index.samples.len());
        for e in &index.samples {
            let img = GrayImage::read_pgm(dir.join(&e.image))?;
            let mask = BinaryMask::read_pbm(dir.join(&e.mask))?;
            if (mask.h, mask.w) != (img.height, img.width) {
                return Err(Error::InvalidArgument(format!(
                    "{}: mask and image sizes differ",
                    e.mask
                )));
            }
            let shape = TensorShape::new(1, 1, img.height, img.width)?;
            let data = img.pixels.iter().map(|p| *p as f32 / 255.0).collect();
            samples.push(Sample { image: Tensor::new(shape, data)?, mask });
        }
        Ok(Dataset { samples })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    image: String,
    mask: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<SynthSpec>,
    samples: Vec<IndexEntry>,
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.count).map(|i| generate_sample(spec, i as u64)).collect();
    Ok(Dataset { samples })
}

/// Sample `index` of `spec`, independent of every other sample.
pub fn generate_sample(spec: &SynthSpec, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (lo, hi) = spec.coverage_bounds();
    let n = spec.size;
    let mask = loop {
        let m = match spec.kind {
            SynthKind::Blob => blob_mask(n, &mut rng),
            SynthKind::Vessel => vessel_mask(n, &mut rng),
        };
        let cov = m.coverage();
        let ok = (lo..=hi).contains(&cov) && (spec.kind == SynthKind::Vessel || m.components() == 1);
        if ok {
            break m;
        }
    };
    let (bg, fg) = match spec.kind {
        SynthKind::Blob => (0.25f32, 0.7f32),
        SynthKind::Vessel => (0.65, 0.25),
    };
    let mut img: Vec<f32> = mask.bits.iter().map(|b| if *b { fg } else { bg }).collect();
    for _ in 0..spec.blur_passes {
        img = box_blur(&img, n, n);
    }
    for v in &mut img {
        let speckle = 1.0 + spec.speckle * rng.gen_range(-1.0f32..1.0);
        *v = ((*v * speckle).clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    let shape = TensorShape::new(1, 1, n, n).expect("size >= 32");
    Sample { image: Tensor::new(shape, img).expect("sized"), mask }
}

fn blob_mask(n: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    let size = n as f64;
    let cy = size / 2.0 + rng.gen_range(-0.1..=0.1) * size;
    let cx = size / 2.0 + rng.gen_range(-0.1..=0.1) * size;
    let a = rng.gen_range(0.14..0.34) * size;
    let b = rng.gen_range(0.14..0.34) * size;
    let theta = rng.gen_range(0.0..PI);
    // Low-frequency radial perturbation (harmonics 2 and 3).
    let harmonics: Vec<(f64, f64, f64)> = (2..=3)
        .map(|k| (k as f64, rng.gen_range(-0.08..0.08), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let (sin, cos) = theta.sin_cos();
    let mut bits = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            let rho = (u * u + v * v).sqrt();
            let phi = v.atan2(u);
            let limit = 1.0 + harmonics.iter().map(|(k, c, p)| c * (k * phi + p).cos()).sum::<f64>();
            bits.push(rho <= limit);
        }
    }
    BinaryMask { h: n, w: n, bits }
}

fn vessel_mask(n: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    let size = n as f64;
    let mut m = BinaryMask::empty(n, n);
    let strokes = rng.gen_range(3..=8);
    for _ in 0..strokes {
        let width = rng.gen_range(1..=4) as f64;
        let r = width / 2.0;
        let mut y = rng.gen_range(0.0..size);
        let mut x = rng.gen_range(0.0..size);
        let mut heading = rng.gen_range(0.0..2.0 * PI);
        let length = rng.gen_range(0.3..0.9) * size;
        let bend = rng.gen_range(-0.04..0.04);
        let wobble = (rng.gen_range(0.02..0.08), rng.gen_range(0.0..2.0 * PI));
        let mut t = 0.0;
        while t < length {
            let (py, px) = (y.floor() as isize, x.floor() as isize);
            let reach = r.ceil() as isize;
            for oy in -reach..=reach {
                for ox in -reach..=reach {
                    let (qy, qx) = (py + oy, px + ox);
                    if qy < 0 || qx < 0 || qy >= n as isize || qx >= n as isize {
                        continue;
                    }
                    let d = ((qy as f64 + 0.5 - y).powi(2) + (qx as f64 + 0.5 - x).powi(2)).sqrt();
                    if d <= r.max(0.5) {
                        m.bits[qy as usize * n + qx as usize] = true;
                    }
                }
            }
            heading += bend + 0.05 * (wobble.0 * t + wobble.1).sin();
            y += 0.5 * heading.sin();
            x += 0.5 * heading.cos();
            t += 0.5;
        }
    }
    m
}

fn box_blur(img: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut cnt = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    sum += img[yy * w + xx];
                    cnt += 1.0;
                }
            }
            out[y * w + x] = sum / cnt;
        }
    }
    out
}
