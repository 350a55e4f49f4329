//! Seeded "blob lesion" images with exact ground-truth boxes.
//!
//! Each lesion is an elliptical Gaussian bump added to a softly textured
//! background. Its box is the half-maximum contour of the bump, so the box
//! follows analytically from the sampled size and aspect ratio.

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationSet, ImageRecord, Instance};
use crate::boxgeom::BoundingBox;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const LESION_CATEGORY: &str = "lesion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub lesions_min: usize,
    pub lesions_max: usize,
    /// Mean of the log-normal lesion size (square root of box area), pixels.
    pub size_mean: f64,
    /// Standard deviation of the underlying normal.
    pub size_sigma: f64,
    pub size_min: f64,
    pub size_max: f64,
    /// Aspect ratio `h / w` drawn uniformly from this range.
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub hard_contrast_min: f64,
    pub hard_contrast_max: f64,
    /// Every hard lesion has contrast below this; every easy one at or above.
    pub hard_threshold: f64,
    pub hard_fraction: f64,
    pub background: f64,
    pub texture_amplitude: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            lesions_min: 3,
            lesions_max: 10,
            size_mean: 20.0,
            size_sigma: 0.35,
            size_min: 6.0,
            size_max: 64.0,
            aspect_min: 0.8,
            aspect_max: 1.25,
            contrast_min: 0.3,
            contrast_max: 0.5,
            hard_contrast_min: 0.1,
            hard_contrast_max: 0.15,
            hard_threshold: 0.2,
            hard_fraction: 0.3,
            background: 0.35,
            texture_amplitude: 0.06,
            noise_level: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth: {m}")));
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        if self.lesions_min > self.lesions_max {
            return bad("lesions_min exceeds lesions_max");
        }
        if !(self.size_mean > 0.0 && self.size_sigma > 0.0) {
            return bad("size_mean and size_sigma must be positive");
        }
        if !(self.size_min > 0.0 && self.size_min < self.size_max) {
            return bad("need 0 < size_min < size_max");
        }
        if self.size_max * self.aspect_max.max(1.0 / self.aspect_min).sqrt() >= self.image_size as f64 {
            return bad("largest lesion does not fit in the image");
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return bad("need 0 < aspect_min <= aspect_max");
        }
        if !(0.0 < self.hard_contrast_min
            && self.hard_contrast_min <= self.hard_contrast_max
            && self.hard_contrast_max < self.hard_threshold
            && self.hard_threshold <= self.contrast_min
            && self.contrast_min <= self.contrast_max)
        {
            return bad("contrast ranges must satisfy 0 < hard_min <= hard_max < hard_threshold <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad("hard_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.background) || self.texture_amplitude < 0.0 || self.noise_level < 0.0 {
            return bad("background must lie in [0, 1] and noise levels must be non-negative");
        }
        Ok(())
    }

    fn size_distribution(&self) -> LogNormal<f64> {
        let mu = self.size_mean.ln() - self.size_sigma * self.size_sigma / 2.0;
        LogNormal::new(mu, self.size_sigma).expect("validated sigma")
    }
}

/// One rendered lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub bbox: BoundingBox,
    pub contrast: f64,
    pub hard: bool,
}

/// Converts a half-maximum semi-axis to the Gaussian standard deviation.
fn sigma_for_half_width(half: f64) -> f64 {
    half / (2.0 * LN_2).sqrt()
}

impl Lesion {
    /// Added intensity at the point `(x, y)`; exactly `contrast / 2` on the box's inscribed ellipse.
    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        let sx = sigma_for_half_width(self.bbox.w() / 2.0);
        let sy = sigma_for_half_width(self.bbox.h() / 2.0);
        let dx = (x - self.bbox.cx()) / sx;
        let dy = (y - self.bbox.cy()) / sy;
        self.contrast * (-(dx * dx + dy * dy) / 2.0).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: u64,
    pub raster: Raster,
    pub lesions: Vec<Lesion>,
}

impl SynthImage {
    pub fn file_name(&self) -> String {
        format!("synth_{:05}.png", self.id)
    }

    pub fn to_sample(&self) -> Sample {
        Sample {
            id: self.id,
            width: self.raster.width,
            height: self.raster.height,
            pixels: self.raster.luma_f64(),
            gts: self.lesions.iter().map(|l| l.bbox).collect(),
            ignore: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub images: Vec<SynthImage>,
    pub annotations: AnnotationSet,
}

impl SynthDataset {
    pub fn samples(&self) -> Vec<Sample> {
        self.images.iter().map(SynthImage::to_sample).collect()
    }

    pub fn lesion_count(&self) -> usize {
        self.images.iter().map(|im| im.lesions.len()).sum()
    }

    /// Write `images/*.png` and `annotations.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        self.images
            .par_iter()
            .try_for_each(|im| im.raster.save_png(&img_dir.join(im.file_name())))?;
        self.annotations.save(&dir.join("annotations.json"))
    }
}

/// Independent stream for image `index`, purpose `stream`.
fn image_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 8) | stream);
    rng
}

/// Lesion `k` (global order) is hard iff `floor((k+1)f) > floor(kf)`, which
/// makes exactly `floor(n f)` of the first `n` lesions hard.
fn is_hard(k: usize, fraction: f64) -> bool {
    ((k + 1) as f64 * fraction).floor() > (k as f64 * fraction).floor()
}

fn overlaps(b: &BoundingBox, others: &[Lesion]) -> bool {
    let [x1, y1, x2, y2] = b.to_corners();
    others.iter().any(|o| {
        let [a1, b1, a2, b2] = o.bbox.to_corners();
        x1 < a2 && a1 < x2 && y1 < b2 && b1 < y2
    })
}

fn draw_lesions(cfg: &SynthConfig, count: usize, first_global: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Lesion>> {
    let sizes = cfg.size_distribution();
    let n = cfg.image_size as f64;
    let mut out: Vec<Lesion> = Vec::with_capacity(count);
    for j in 0..count {
        let size = loop {
            let s = sizes.sample(rng);
            if (cfg.size_min..=cfg.size_max).contains(&s) {
                break s;
            }
        };
        let ratio = rng.random_range(cfg.aspect_min..=cfg.aspect_max);
        let (w, h) = (size / ratio.sqrt(), size * ratio.sqrt());
        let hard = is_hard(first_global + j, cfg.hard_fraction);
        let contrast = if hard {
            rng.random_range(cfg.hard_contrast_min..=cfg.hard_contrast_max)
        } else {
            rng.random_range(cfg.contrast_min..=cfg.contrast_max)
        };
        // retry placement a bounded number of times to avoid overlap
        let mut bbox = None;
        for _ in 0..64 {
            let cx = rng.random_range(w / 2.0..=n - w / 2.0);
            let cy = rng.random_range(h / 2.0..=n - h / 2.0);
            // canonical corner form so the annotation file reproduces it exactly
            let [x1, y1, x2, y2] = BoundingBox::new(cx, cy, w, h)?.to_corners();
            let b = BoundingBox::from_corners(x1, y1, x2, y2)?;
            let free = !overlaps(&b, &out);
            bbox = Some(b);
            if free {
                break;
            }
        }
        out.push(Lesion {
            bbox: bbox.expect("at least one placement"),
            contrast,
            hard,
        });
    }
    Ok(out)
}

fn render(cfg: &SynthConfig, lesions: &[Lesion], rng: &mut ChaCha8Rng) -> Raster {
    let n = cfg.image_size;
    // low-frequency texture: a few random plane waves
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let period = rng.random_range(24.0..96.0);
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI / period;
            (k * angle.cos(), k * angle.sin(), phase)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_level.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex: f64 = waves
                .iter()
                .map(|(kx, ky, p)| (kx * fx + ky * fy + p).sin())
                .sum::<f64>()
                / waves.len() as f64;
            let mut v = cfg.background + cfg.texture_amplitude * tex;
            for l in lesions {
                v += l.intensity(fx, fy);
            }
            if cfg.noise_level > 0.0 {
                v += noise.sample(rng);
            }
            data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Raster {
        width: n,
        height: n,
        channels: 1,
        data,
    }
}

/// Generate `n_images` images. Image ids start at 1; the output depends only on
/// `cfg` and `n_images`.
pub fn generate(cfg: &SynthConfig, n_images: usize) -> Result<SynthDataset> {
    cfg.validate()?;
    let counts: Vec<usize> = (0..n_images)
        .map(|i| image_rng(cfg.seed, i, 0).random_range(cfg.lesions_min..=cfg.lesions_max))
        .collect();
    let offsets: Vec<usize> = counts
        .iter()
        .scan(0, |acc, c| {
            let start = *acc;
            *acc += c;
            Some(start)
        })
        .collect();
    let images: Vec<SynthImage> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = image_rng(cfg.seed, i, 1);
            let lesions = draw_lesions(cfg, counts[i], offsets[i], &mut rng)?;
            let raster = render(cfg, &lesions, &mut rng);
            Ok(SynthImage {
                id: i as u64 + 1,
                raster,
                lesions,
            })
        })
        .collect::<Result<_>>()?;

    let mut annotations = AnnotationSet::default();
    let mut next_id = 1;
    for im in &images {
        annotations.images.push(ImageRecord {
            id: im.id,
            file_name: im.file_name(),
            width: cfg.image_size,
            height: cfg.image_size,
            parent: None,
            ignore_regions: vec![],
        });
        for l in &im.lesions {
            annotations.instances.push(Instance {
                id: next_id,
                image_id: im.id,
                category: LESION_CATEGORY.to_string(),
                bbox: l.bbox.to_corners(),
                polygon: None,
            });
            next_id += 1;
        }
    }
    Ok(SynthDataset { images, annotations })
}
