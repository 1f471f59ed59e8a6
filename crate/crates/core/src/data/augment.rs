use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::{Image, View};

/// Satellite-view augmentation: horizontal flip, small rotation and a
/// random square crop resized back to the input size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip: bool,
    pub max_rotation_deg: f64,
    /// Crop side as a fraction of the image side, sampled uniformly.
    pub crop_scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip: true,
            max_rotation_deg: 10.0,
            crop_scale: (0.9, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    pub rotation: f64,
    pub crop_scale: f64,
    /// Crop center offset in normalized coordinates.
    pub crop_center: (f64, f64),
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        rotation: 0.0,
        crop_scale: 1.0,
        crop_center: (0.0, 0.0),
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let flip = cfg.hflip && rng.random_bool(0.5);
        let max = cfg.max_rotation_deg.to_radians();
        let rotation = if max > 0.0 {
            rng.random_range(-max..=max)
        } else {
            0.0
        };
        let (lo, hi) = cfg.crop_scale;
        let crop_scale = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            hi
        };
        let slack = (1.0 - crop_scale).max(0.0);
        let crop_center = if slack > 0.0 {
            (
                rng.random_range(-slack..=slack),
                rng.random_range(-slack..=slack),
            )
        } else {
            (0.0, 0.0)
        };
        Self {
            flip,
            rotation,
            crop_scale,
            crop_center,
        }
    }
}

fn bilinear(img: &Image, x: f64, y: f64, c: usize) -> f64 {
    let (h, w, _) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
    let bottom = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Apply crop-resize, rotation and flip by inverse mapping with bilinear
/// sampling (edges clamped). The identity parameters return the input.
pub fn augment_image(img: &Image, params: &AugmentParams) -> Image {
    if *params == AugmentParams::IDENTITY {
        return img.clone();
    }
    let (h, w, ch) = img.dim();
    let (s, c) = params.rotation.sin_cos();
    Array3::from_shape_fn((h, w, ch), |(py, px, k)| {
        let vx = (px as f64 + 0.5) / w as f64 * 2.0 - 1.0;
        let vy = (py as f64 + 0.5) / h as f64 * 2.0 - 1.0;
        let cx = params.crop_center.0 + params.crop_scale * vx;
        let cy = params.crop_center.1 + params.crop_scale * vy;
        let mut rx = c * cx - s * cy;
        let ry = s * cx + c * cy;
        if params.flip {
            rx = -rx;
        }
        let sx = (rx + 1.0) / 2.0 * w as f64 - 0.5;
        let sy = (ry + 1.0) / 2.0 * h as f64 - 0.5;
        bilinear(img, sx, sy, k)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatelliteDraw {
    /// Index into the manifest entries.
    pub entry: usize,
    pub params: AugmentParams,
}

/// One epoch of satellite draws: every satellite entry `factor` times
/// (pass-major, manifest order), each draw with its own augmentation.
pub fn oversample_satellite<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    factor: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<SatelliteDraw> {
    let sats: Vec<usize> = manifest
        .view_entries(View::Satellite)
        .map(|(i, _)| i)
        .collect();
    let mut draws = Vec::with_capacity(sats.len() * factor);
    for _ in 0..factor {
        for &entry in &sats {
            draws.push(SatelliteDraw {
                entry,
                params: AugmentParams::sample(cfg, rng),
            });
        }
    }
    draws
}
