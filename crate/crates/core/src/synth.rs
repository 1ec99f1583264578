//! Seeded synthetic crowd scenes, training augmentation and count metrics.
//!
//! A scene is a noisy background with clustered soft blobs, one per person.
//! Blob radius shrinks towards the bottom of the frame to mimic perspective,
//! and clusters give strongly varying local density.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub clusters_max: usize,
    /// Blob radius at the top and at the bottom of the image, in pixels.
    pub radius_top: f64,
    pub radius_bottom: f64,
    /// Minimum spacing between annotated points, in pixels.
    pub min_separation: f64,
    pub noise_std: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 128,
            width: 128,
            count_min: 5,
            count_max: 80,
            clusters_max: 4,
            radius_top: 3.5,
            radius_bottom: 1.5,
            min_separation: 3.0,
            noise_std: 0.04,
            intensity_min: 0.35,
            intensity_max: 0.75,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.count_min > self.count_max {
            return Err(Error::Config(format!(
                "scene.count_min ({}) exceeds scene.count_max ({})",
                self.count_min, self.count_max
            )));
        }
        if self.radius_top < 1.0 || self.radius_bottom < 1.0 {
            return Err(Error::Config("scene radii must be at least 1 pixel".into()));
        }
        if self.clusters_max == 0 {
            return Err(Error::Config("scene.clusters_max must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.intensity_min <= self.intensity_max) {
            return Err(Error::Config("bad scene noise/intensity parameters".into()));
        }
        Ok(())
    }

    pub fn radius_at(&self, y: f64) -> f64 {
        let t = (y / self.height as f64).clamp(0.0, 1.0);
        self.radius_top + (self.radius_bottom - self.radius_top) * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `3×H×W`, values in [0, 1].
    pub image: Tensor,
    pub points: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        let d = self.image.data();
        for i in 0..h * w {
            for c in 0..3 {
                out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn points_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in &self.points {
            writeln!(out, "{x},{y}").unwrap();
        }
        out
    }
}

/// Renders one scene. The seed fully determines the result.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let count = rng.random_range(cfg.count_min..=cfg.count_max);

    let n_clusters = rng.random_range(1..=cfg.clusters_max);
    let clusters: Vec<(f64, f64, f64)> = (0..n_clusters)
        .map(|_| {
            let spread = rng.random_range(0.05..0.2) * hf.min(wf);
            (rng.random_range(0.0..wf), rng.random_range(0.0..hf), spread)
        })
        .collect();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let inside = |x: f64, y: f64| x >= 1.0 && x < wf - 1.0 && y >= 1.0 && y < hf - 1.0;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for attempt in 0..200 {
            let (x, y) = if rng.random_bool(0.8) {
                let (cx, cy, s) = clusters[rng.random_range(0..clusters.len())];
                (cx + s * std_normal.sample(&mut rng), cy + s * std_normal.sample(&mut rng))
            } else {
                (rng.random_range(0.0..wf), rng.random_range(0.0..hf))
            };
            if !inside(x, y) {
                continue;
            }
            let spaced = points.iter().all(|&(px, py)| (px - x).hypot(py - y) >= cfg.min_separation);
            if spaced || attempt == 199 {
                placed = Some((x, y));
                break;
            }
        }
        let p = placed.unwrap_or_else(|| (rng.random_range(1.0..wf - 1.0), rng.random_range(1.0..hf - 1.0)));
        points.push(p);
    }

    // Background: smooth vertical tint plus per-pixel noise.
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.35));
    let tilt = rng.random_range(-0.1..0.1);
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("noise std");
    let mut img = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                img[(c * h + y) * w + x] = base[c] + tilt * (y as f64 / hf - 0.5) + n;
            }
        }
    }

    // People: Gaussian blobs with individual brightness and tint.
    for &(px, py) in &points {
        let r = cfg.radius_at(py);
        let amp = rng.random_range(cfg.intensity_min..=cfg.intensity_max);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
        let reach = (3.0 * r).ceil() as i64;
        let (x0, y0) = (px.floor() as i64, py.floor() as i64);
        for yy in (y0 - reach).max(0)..=(y0 + reach).min(h as i64 - 1) {
            for xx in (x0 - reach).max(0)..=(x0 + reach).min(w as i64 - 1) {
                let d2 = (xx as f64 + 0.5 - px).powi(2) + (yy as f64 + 0.5 - py).powi(2);
                let v = amp * (-d2 / (2.0 * r * r)).exp();
                for c in 0..3 {
                    img[(c * h + yy as usize) * w + xx as usize] += tint[c] * v;
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Scene {
        image: Tensor::new(&[3, h, w], img).expect("scene shape"),
        points,
        seed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Square crop side in pixels; must be a multiple of the output stride.
    pub crop: usize,
    pub contrast_min: f64,
    pub contrast_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            scale_min: 0.7,
            scale_max: 1.3,
            crop: 88,
            contrast_min: 0.7,
            contrast_max: 1.3,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, scene: &SceneConfig, stride: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max) || !(0.0 < self.contrast_min && self.contrast_min <= self.contrast_max) {
            return Err(Error::Config("augment ranges must be positive and ordered".into()));
        }
        if self.crop == 0 || self.crop % stride != 0 {
            return Err(Error::Config(format!("augment.crop ({}) must be a positive multiple of {stride}", self.crop)));
        }
        let smallest = (scene.height.min(scene.width) as f64 * self.scale_min).round() as usize;
        if self.crop > smallest {
            return Err(Error::Config(format!(
                "augment.crop ({}) exceeds the smallest scaled image side ({smallest})",
                self.crop
            )));
        }
        Ok(())
    }
}

/// Nearest-neighbor rescale by `factor`, crop a `crop×crop` window at
/// `origin = (x, y)`, then contrast `γ(v − ½) + ½` clamped to [0, 1].
/// Points outside the window are dropped.
pub fn augment_with(scene: &Scene, factor: f64, origin: (usize, usize), crop: usize, gamma: f64) -> Result<Scene> {
    let (h, w) = (scene.height(), scene.width());
    let sh = (h as f64 * factor).round() as usize;
    let sw = (w as f64 * factor).round() as usize;
    if crop == 0 || origin.0 + crop > sw || origin.1 + crop > sh {
        return Err(Error::Config(format!(
            "crop {crop} at {origin:?} does not fit the {sw}x{sh} scaled image"
        )));
    }
    let src = |d: usize, n: usize| (((d as f64 + 0.5) / factor) as usize).min(n - 1);
    let d = scene.image.data();
    let mut out = vec![0.0; 3 * crop * crop];
    for c in 0..3 {
        for y in 0..crop {
            let sy = src(y + origin.1, h);
            for x in 0..crop {
                let sx = src(x + origin.0, w);
                let v = d[(c * h + sy) * w + sx];
                out[(c * crop + y) * crop + x] = (gamma * (v - 0.5) + 0.5).clamp(0.0, 1.0);
            }
        }
    }
    let (ox, oy) = (origin.0 as f64, origin.1 as f64);
    let limit = crop as f64;
    let points = scene
        .points
        .iter()
        .map(|&(x, y)| (x * factor - ox, y * factor - oy))
        .filter(|&(x, y)| x >= 0.0 && x < limit && y >= 0.0 && y < limit)
        .collect();
    Ok(Scene {
        image: Tensor::new(&[3, crop, crop], out)?,
        points,
        seed: scene.seed,
    })
}

/// Random scale, crop and contrast drawn from `cfg`.
pub fn augment(scene: &Scene, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Scene> {
    let factor = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let sh = (scene.height() as f64 * factor).round() as usize;
    let sw = (scene.width() as f64 * factor).round() as usize;
    if cfg.crop > sh || cfg.crop > sw {
        return Err(Error::Config(format!("crop {} exceeds scaled image {sw}x{sh}", cfg.crop)));
    }
    let ox = rng.random_range(0..=sw - cfg.crop);
    let oy = rng.random_range(0..=sh - cfg.crop);
    let gamma = rng.random_range(cfg.contrast_min..=cfg.contrast_max);
    augment_with(scene, factor, (ox, oy), cfg.crop, gamma)
}

/// Mean absolute error and root mean squared error of counts.
pub fn mae_mse(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Usage(format!(
            "count lists must be non-empty and equal length, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let mse = (pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mae, mse))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: SceneConfig,
    pub splits: Vec<SplitManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub seeds: Vec<u64>,
}
