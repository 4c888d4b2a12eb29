//! Synthetic "patterned individuals": random dot patterns photographed under
//! known homographies, a handcrafted blob-detecting model to embed them, and
//! exact reference correspondences.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::builder::ModelBuilder;
use crate::container::save_model;
use crate::correspondence::CorrespondenceRecord;
use crate::error::{Error, Result};
use crate::eval::{ManifestEntry, Split};
use crate::image::{save_rgb_png, RgbImage};
use crate::model::{InputSpec, ModelGraph, Normalization};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Individuals split into query and gallery views.
    pub individuals: usize,
    /// Extra individuals whose views all go to the train split.
    pub train_individuals: usize,
    pub views: usize,
    /// Views per evaluation individual that become queries; the rest are
    /// gallery images.
    pub query_views: usize,
    pub size: usize,
    pub dots: (usize, usize),
    pub radius: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            individuals: 40,
            train_individuals: 10,
            views: 5,
            query_views: 2,
            size: 128,
            dots: (70, 90),
            radius: (2.0, 3.2),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dot {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

/// Appearance change applied after the geometric warp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
    pub noise: f64,
}

const BACKGROUND: f64 = 0.8;
const INK: f64 = 0.15;

/// Standard normal deviate by Box–Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn dot_pattern(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Vec<Dot> {
    let n = rng.gen_range(cfg.dots.0..=cfg.dots.1);
    let margin = 6.0;
    let hi = cfg.size as f64 - margin;
    (0..n)
        .map(|_| Dot {
            x: rng.gen_range(margin..hi),
            y: rng.gen_range(margin..hi),
            r: rng.gen_range(cfg.radius.0..cfg.radius.1),
        })
        .collect()
}

/// A mild random homography about the image centre: rotation, anisotropic
/// scale, shear, translation and a touch of perspective.
pub fn random_view(rng: &mut ChaCha8Rng, size: usize) -> Matrix3<f64> {
    let c = size as f64 / 2.0;
    let theta = rng.gen_range(-0.15..0.15f64);
    let (sx, sy) = (rng.gen_range(0.92..1.08), rng.gen_range(0.92..1.08));
    let shear = rng.gen_range(-0.05..0.05);
    let (tx, ty) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    let (px, py) = (rng.gen_range(-4e-4..4e-4), rng.gen_range(-4e-4..4e-4));
    let to_origin = Matrix3::new(1.0, 0.0, -c, 0.0, 1.0, -c, 0.0, 0.0, 1.0);
    let back = Matrix3::new(1.0, 0.0, c + tx, 0.0, 1.0, c + ty, 0.0, 0.0, 1.0);
    let (s, co) = theta.sin_cos();
    let rot = Matrix3::new(co, -s, 0.0, s, co, 0.0, 0.0, 0.0, 1.0);
    let affine = Matrix3::new(sx, shear, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0);
    let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
    let h = back * persp * rot * affine * to_origin;
    h / h[(2, 2)]
}

pub fn random_photometric(rng: &mut ChaCha8Rng) -> Photometric {
    Photometric {
        brightness: rng.gen_range(-0.08..0.08),
        contrast: rng.gen_range(0.85..1.15),
        noise: 0.03,
    }
}

fn apply(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let v = h * Vector3::new(x, y, 1.0);
    (v[0] / v[2], v[1] / v[2])
}

/// Renders `dots` (canonical coordinates) seen through `view`, which maps
/// canonical points to image points. Pixel `(x, y)` covers `[x, x+1)`.
pub fn render(dots: &[Dot], view: &Matrix3<f64>, photo: Photometric, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let inv = view.try_inverse().expect("views are invertible");
    let mut img = RgbImage::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = apply(&inv, x as f64 + 0.5, y as f64 + 0.5);
            let mut cover: f64 = 0.0;
            for d in dots {
                let dist = ((u - d.x).powi(2) + (v - d.y).powi(2)).sqrt();
                cover = cover.max((d.r - dist + 0.5).clamp(0.0, 1.0));
            }
            let base = BACKGROUND + (INK - BACKGROUND) * cover;
            let val = (base - 0.5) * photo.contrast + 0.5 + photo.brightness + photo.noise * normal(rng);
            let val = val.clamp(0.0, 1.0) as f32;
            for c in 0..3 {
                img.set(c, y, x, val);
            }
        }
    }
    img
}

/// Zero-sum difference of Gaussians that fires on dark blobs.
fn dark_blob_kernel(k: usize, narrow: f64, wide: f64) -> Vec<f32> {
    let c = (k / 2) as f64;
    let g = |s: f64| -> Vec<f64> {
        let w: Vec<f64> = (0..k * k)
            .map(|i| {
                let (dy, dx) = ((i / k) as f64 - c, (i % k) as f64 - c);
                (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
            })
            .collect();
        let t: f64 = w.iter().sum();
        w.into_iter().map(|v| v / t).collect()
    };
    g(wide)
        .iter()
        .zip(g(narrow))
        .map(|(w, n)| (w - n) as f32)
        .collect()
}

/// One-hot shift kernels reading channel `source` of an `in_channels` input:
/// output channel `dy * k + dx` copies the input at offset `(dx - k/2, dy - k/2)`.
fn shift_weights(k: usize, in_channels: usize, source: usize) -> impl FnMut(usize) -> f32 {
    move |flat| {
        let per_out = in_channels * k * k;
        let (o, rest) = (flat / per_out, flat % per_out);
        let (ci, tap) = (rest / (k * k), rest % (k * k));
        if ci == source && tap == o {
            1.0
        } else {
            0.0
        }
    }
}

/// The fixed blob-detecting embedding model used with the synthetic data.
///
/// A dark-blob detector feeds three matching scales (cumulative stride 4, 8
/// and 16). At each scale the descriptor of a cell is the pooled blob map in
/// its k×k neighbourhood, one channel per offset. The embedding is the
/// coarsest map, average-pooled and flattened.
pub fn blob_model(size: usize) -> Result<ModelGraph> {
    let input = InputSpec {
        channels: 1,
        height: size,
        width: size,
    };
    let dog = dark_blob_kernel(7, 1.2, 2.8);
    ModelBuilder::new(input)
        .normalization(Normalization {
            mean: vec![0.5],
            std: vec![0.25],
        })
        .conv(1, 7, 1, 3, dog, vec![-0.25])
        .relu()
        .maxpool(2, 2)
        .maxpool(2, 2)
        .conv_with(25, 5, 1, 2, shift_weights(5, 1, 0), |_| 0.0)
        .relu()
        .tap()
        .maxpool(2, 2)
        .conv_with(25, 5, 1, 2, shift_weights(5, 25, 12), |_| 0.0)
        .relu()
        .default_tap()
        .maxpool(2, 2)
        .conv_with(9, 3, 1, 1, shift_weights(3, 25, 12), |_| 0.0)
        .relu()
        .tap()
        .avgpool(2, 2)
        .flatten()
        .build()
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub id: String,
    pub identity: String,
    pub split: Split,
    pub view: Matrix3<f64>,
    pub image: RgbImage,
}

/// Deterministically generates every view of every individual.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<SyntheticImage>> {
    if cfg.views < 2 || cfg.query_views == 0 || cfg.query_views >= cfg.views {
        return Err(Error::InvalidArgument(format!(
            "need 0 < query_views ({}) < views ({})",
            cfg.query_views, cfg.views
        )));
    }
    let mut out = Vec::new();
    for ind in 0..cfg.individuals + cfg.train_individuals {
        // Per-individual streams keep each pattern independent of the others.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(ind as u64));
        let dots = dot_pattern(&mut rng, cfg);
        let train = ind >= cfg.individuals;
        let identity = format!("ind{ind:03}");
        for v in 0..cfg.views {
            let view = random_view(&mut rng, cfg.size);
            let photo = random_photometric(&mut rng);
            let image = render(&dots, &view, photo, cfg.size, &mut rng);
            let split = if train {
                Split::Train
            } else if v < cfg.query_views {
                Split::Query
            } else {
                Split::Gallery
            };
            out.push(SyntheticImage {
                id: format!("images/{identity}_v{v}.png"),
                identity: identity.clone(),
                split,
                view,
                image,
            });
        }
    }
    Ok(out)
}

/// Reference correspondences between two views: a regular grid of canonical
/// points mapped through each view.
pub fn correspondences(a: &SyntheticImage, b: &SyntheticImage, size: usize) -> CorrespondenceRecord {
    let steps = [0.15, 0.38, 0.62, 0.85];
    let mut points = Vec::new();
    for sy in steps {
        for sx in steps {
            let (cx, cy) = (sx * size as f64, sy * size as f64);
            let (x1, y1) = apply(&a.view, cx, cy);
            let (x2, y2) = apply(&b.view, cx, cy);
            points.push([x1, y1, x2, y2]);
        }
    }
    CorrespondenceRecord::new(&a.id, &b.id, points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFiles {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub correspondences: PathBuf,
    pub model: PathBuf,
}

/// Writes images, `manifest.jsonl`, `correspondences.jsonl` (every
/// query–gallery pair and every unordered train pair) and `model.pxw`.
pub fn write_dataset(root: &Path, cfg: &SyntheticConfig) -> Result<DatasetFiles> {
    let images = generate(cfg)?;
    std::fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::new();
    for img in &images {
        save_rgb_png(&root.join(&img.id), &img.image)?;
        let entry = ManifestEntry {
            image_path: img.id.clone(),
            identity: img.identity.clone(),
            split: img.split,
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    let mut corr = String::new();
    let of = |s: Split| images.iter().filter(move |i| i.split == s);
    for q in of(Split::Query) {
        for g in of(Split::Gallery) {
            corr.push_str(&serde_json::to_string(&correspondences(q, g, cfg.size))?);
            corr.push('\n');
        }
    }
    let train: Vec<&SyntheticImage> = of(Split::Train).collect();
    for (k, a) in train.iter().enumerate() {
        for b in &train[k + 1..] {
            corr.push_str(&serde_json::to_string(&correspondences(a, b, cfg.size))?);
            corr.push('\n');
        }
    }
    let files = DatasetFiles {
        root: root.to_path_buf(),
        manifest: root.join("manifest.jsonl"),
        correspondences: root.join("correspondences.jsonl"),
        model: root.join("model.pxw"),
    };
    std::fs::write(&files.manifest, manifest).map_err(|e| Error::io(&files.manifest, e))?;
    std::fs::write(&files.correspondences, corr).map_err(|e| Error::io(&files.correspondences, e))?;
    save_model(&files.model, &blob_model(cfg.size)?)?;
    Ok(files)
}
