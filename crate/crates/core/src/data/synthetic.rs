//! Procedural paired-view scenes.
//!
//! Every location is a flat scene on `[-1, 1]^2`: a two-tone gradient
//! ground plus a handful of colored shapes, all drawn from a generator
//! keyed by `(seed, location)`. The satellite view renders the scene
//! top-down; UAV views render it through a random similarity transform
//! (rotation, scale, translation) whose parameters are recorded.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, EntrySource, ManifestEntry, Split};
use super::university::{split_dir, view_dir};
use super::View;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_locations: usize,
    pub uav_views_per_location: usize,
    pub seed: u64,
    /// Side length of materialized images.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Extra held-out locations written to the test splits.
    #[serde(default)]
    pub test_locations: usize,
}

fn default_image_size() -> usize {
    64
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_locations: 8,
            uav_views_per_location: 6,
            seed: 7,
            image_size: default_image_size(),
            test_locations: 0,
        }
    }
}

/// Similarity transform from scene coordinates to view coordinates:
/// `v = scale * R(rotation) * u + (tx, ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub rotation: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl ViewTransform {
    pub const IDENTITY: ViewTransform = ViewTransform {
        rotation: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Random UAV pose: any heading, 0.7-1.3x scale, shift up to 10% of
    /// the scene extent per axis.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            rotation: rng.random_range(0.0..std::f64::consts::TAU),
            scale: rng.random_range(0.7..=1.3),
            tx: rng.random_range(-0.2..=0.2),
            ty: rng.random_range(-0.2..=0.2),
        }
    }

    pub fn to_scene(&self, vx: f64, vy: f64) -> (f64, f64) {
        let (x, y) = ((vx - self.tx) / self.scale, (vy - self.ty) / self.scale);
        let (s, c) = self.rotation.sin_cos();
        (c * x + s * y, -s * x + c * y)
    }

    pub fn to_view(&self, ux: f64, uy: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (
            self.scale * (c * ux - s * uy) + self.tx,
            self.scale * (s * ux + c * uy) + self.ty,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub half_size: (f64, f64),
    pub angle: f64,
    pub color: [f64; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let lx = (c * dx + s * dy) / self.half_size.0;
        let ly = (-s * dx + c * dy) / self.half_size.1;
        match self.kind {
            ShapeKind::Rect => lx.abs() <= 1.0 && ly.abs() <= 1.0,
            ShapeKind::Ellipse => lx * lx + ly * ly <= 1.0,
            // apex up, base on ly = 1
            ShapeKind::Triangle => (-1.0..=1.0).contains(&ly) && lx.abs() <= (ly + 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ground: [[f64; 3]; 2],
    pub ground_angle: f64,
    pub shapes: Vec<Shape>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b.wrapping_mul(0x2545_F491_4F6C_DD1D))
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

impl Scene {
    pub fn generate(seed: u64, location: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, location as u64, u64::MAX));
        let ground = [random_color(&mut rng), random_color(&mut rng)];
        let ground_angle = rng.random_range(0.0..std::f64::consts::TAU);
        let count = rng.random_range(5..=8);
        let shapes = (0..count)
            .map(|_| Shape {
                kind: match rng.random_range(0..3) {
                    0 => ShapeKind::Rect,
                    1 => ShapeKind::Ellipse,
                    _ => ShapeKind::Triangle,
                },
                center: (rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)),
                half_size: (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                color: random_color(&mut rng),
            })
            .collect();
        Self {
            ground,
            ground_angle,
            shapes,
        }
    }

    pub fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        if let Some(shape) = self.shapes.iter().rev().find(|s| s.contains(x, y)) {
            return shape.color;
        }
        let (s, c) = self.ground_angle.sin_cos();
        let t = (((c * x + s * y) * 0.5 + 0.5) * 0.5 + 0.25).clamp(0.0, 1.0);
        let [a, b] = self.ground;
        [
            a[0] * (1.0 - t) + b[0] * t,
            a[1] * (1.0 - t) + b[1] * t,
            a[2] * (1.0 - t) + b[2] * t,
        ]
    }
}

/// Render a scene through `transform` at `size x size`, 2x2 supersampled.
pub fn render_view(scene: &Scene, transform: &ViewTransform, size: usize) -> RgbImage {
    let n = size as f64;
    RgbImage::from_fn(size as u32, size as u32, |px, py| {
        let mut acc = [0.0; 3];
        for sy in 0..2 {
            for sx in 0..2 {
                let vx = (px as f64 + 0.25 + 0.5 * sx as f64) / n * 2.0 - 1.0;
                let vy = (py as f64 + 0.25 + 0.5 * sy as f64) / n * 2.0 - 1.0;
                let (ux, uy) = transform.to_scene(vx, vy);
                let c = scene.color_at(ux, uy);
                for ch in 0..3 {
                    acc[ch] += c[ch] / 4.0;
                }
            }
        }
        Rgb(acc.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub train: DatasetManifest,
    /// Present only when `test_locations > 0`, in [`Split::ALL`] order.
    pub test: Vec<DatasetManifest>,
    /// UAV pose per `(location, view_index)`; satellite views are identity.
    pub transforms: BTreeMap<(usize, usize), ViewTransform>,
}

impl SyntheticDataset {
    pub fn scene(&self, location: usize) -> Scene {
        Scene::generate(self.config.seed, location)
    }

    pub fn transform(&self, location: usize, view_index: usize) -> ViewTransform {
        self.transforms
            .get(&(location, view_index))
            .copied()
            .unwrap_or(ViewTransform::IDENTITY)
    }

    pub fn render(&self, location: usize, view_index: usize, size: usize) -> RgbImage {
        render_view(
            &self.scene(location),
            &self.transform(location, view_index),
            size,
        )
    }

    pub fn manifest(&self, split: Split) -> Option<&DatasetManifest> {
        if split == Split::Train {
            Some(&self.train)
        } else {
            self.test.iter().find(|m| m.split == split)
        }
    }
}

/// Transform of UAV view `view_index` (1-based) of a location.
pub fn uav_transform(seed: u64, location: usize, view_index: usize) -> ViewTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, location as u64, view_index as u64));
    ViewTransform::sample(&mut rng)
}

/// Render an entry sourced from the generator.
pub fn render_entry(seed: u64, location: usize, view_index: usize, size: usize) -> RgbImage {
    let t = if view_index == 0 {
        ViewTransform::IDENTITY
    } else {
        uav_transform(seed, location, view_index)
    };
    render_view(&Scene::generate(seed, location), &t, size)
}

fn entries_for(seed: u64, location: usize, views: usize, view: View) -> Vec<ManifestEntry> {
    let range = match view {
        View::Satellite => 0..1,
        View::Uav => 1..views + 1,
    };
    range
        .map(|view_index| ManifestEntry {
            source: EntrySource::Synthetic {
                seed,
                location,
                view_index,
            },
            location_id: location,
            view,
        })
        .collect()
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    if config.num_locations < 2 {
        return Err(Error::Config(format!(
            "need at least 2 locations for retrieval, got {}",
            config.num_locations
        )));
    }
    if config.image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    let seed = config.seed;
    let views = config.uav_views_per_location;
    let mut transforms = BTreeMap::new();
    let total = config.num_locations + config.test_locations;
    for location in 0..total {
        for view_index in 1..=views {
            transforms.insert(
                (location, view_index),
                uav_transform(seed, location, view_index),
            );
        }
    }
    let mut train = Vec::new();
    for location in 0..config.num_locations {
        train.extend(entries_for(seed, location, views, View::Satellite));
        train.extend(entries_for(seed, location, views, View::Uav));
    }
    let mut test = Vec::new();
    if config.test_locations > 0 {
        for split in Split::ALL.into_iter().filter(|s| s.is_test()) {
            let view = if view_dir(split, View::Uav).is_some() {
                View::Uav
            } else {
                View::Satellite
            };
            let entries = (config.num_locations..total)
                .flat_map(|l| entries_for(seed, l, views, view))
                .collect();
            test.push(DatasetManifest::new(split, entries));
        }
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        train: DatasetManifest::new(Split::Train, train),
        test,
        transforms,
    })
}

fn entry_file(split: Split, entry: &ManifestEntry) -> std::path::PathBuf {
    let EntrySource::Synthetic {
        location,
        view_index,
        ..
    } = &entry.source
    else {
        unreachable!("synthetic manifests only hold generator entries")
    };
    let sub = view_dir(split, entry.view).expect("view matches split");
    let name = match entry.view {
        View::Satellite => format!("{location:04}.png"),
        View::Uav => format!("image-{view_index:02}.png"),
    };
    Path::new(split_dir(split))
        .join(sub)
        .join(format!("{location:04}"))
        .join(name)
}

fn manifest_file(split: Split) -> String {
    match split {
        Split::Train => "manifest.json".to_string(),
        other => format!(
            "manifest_{}.json",
            serde_json::to_value(other).unwrap().as_str().unwrap()
        ),
    }
}

/// Write the dataset under `root` in the University-1652 layout, plus
/// path-based manifests and the recorded UAV transforms.
///
/// Refuses to write into an existing non-empty `root` unless `force`.
pub fn materialize(
    dataset: &SyntheticDataset,
    root: &Path,
    force: bool,
) -> Result<Vec<std::path::PathBuf>> {
    if root.exists()
        && fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some()
    {
        if !force {
            return Err(Error::Config(format!(
                "output {} exists; pass --force to overwrite",
                root.display()
            )));
        }
        for sub in ["train", "test"] {
            let p = root.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let size = dataset.config.image_size;
    let mut written = Vec::new();
    let manifests = std::iter::once(&dataset.train).chain(dataset.test.iter());
    for manifest in manifests {
        let mut entries = Vec::with_capacity(manifest.len());
        for entry in &manifest.entries {
            let rel = entry_file(manifest.split, entry);
            let path = root.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let EntrySource::Synthetic {
                location,
                view_index,
                ..
            } = entry.source
            else {
                unreachable!()
            };
            dataset
                .render(location, view_index, size)
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
            written.push(path);
            entries.push(ManifestEntry {
                source: EntrySource::Path(rel),
                ..entry.clone()
            });
        }
        let out = DatasetManifest::new(manifest.split, entries);
        let path = root.join(manifest_file(manifest.split));
        out.save(&path)?;
        written.push(path);
    }
    let transforms: Vec<serde_json::Value> = dataset
        .transforms
        .iter()
        .map(|(&(location, view_index), t)| {
            serde_json::json!({ "location": location, "view_index": view_index, "transform": t })
        })
        .collect();
    let path = root.join("transforms.json");
    fs::write(&path, serde_json::to_string_pretty(&transforms)?)
        .map_err(|e| Error::io(&path, e))?;
    written.push(path);
    let path = root.join("synthetic.json");
    fs::write(&path, serde_json::to_string_pretty(&dataset.config)?)
        .map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn counts_and_reproducibility() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.train.filter_view(View::Satellite).len(), 8);
        assert_eq!(a.train.filter_view(View::Uav).len(), 48);
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.render(3, 2, 32).into_raw(), b.render(3, 2, 32).into_raw());
    }

    #[test]
    fn single_location_is_rejected() {
        let cfg = SyntheticConfig {
            num_locations: 1,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn satellite_renders_differ_between_locations() {
        let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let renders: HashSet<Vec<u8>> = (0..8).map(|l| ds.render(l, 0, 64).into_raw()).collect();
        assert_eq!(renders.len(), 8);
    }

    #[test]
    fn uav_views_replay_from_recorded_transform() {
        let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let t = ds.transform(5, 4);
        let replay = render_view(&Scene::generate(7, 5), &t, 48);
        assert_eq!(replay, ds.render(5, 4, 48));
        assert_eq!(replay, render_entry(7, 5, 4, 48));
        assert!((0.7..=1.3).contains(&t.scale));
        assert!(t.tx.abs() <= 0.2 && t.ty.abs() <= 0.2);
    }

    #[test]
    fn transform_inverse_round_trips() {
        let t = ViewTransform {
            rotation: 1.1,
            scale: 0.8,
            tx: 0.1,
            ty: -0.05,
        };
        let (vx, vy) = t.to_view(0.3, -0.6);
        let (ux, uy) = t.to_scene(vx, vy);
        assert!((ux - 0.3).abs() < 1e-12 && (uy + 0.6).abs() < 1e-12);
    }

    #[test]
    fn test_splits_use_held_out_locations() {
        let cfg = SyntheticConfig {
            test_locations: 3,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.test.len(), 4);
        let q = ds.manifest(Split::QueryUav).unwrap();
        assert_eq!(q.len(), 18);
        assert!(q.locations().iter().all(|&l| l >= 8));
        assert_eq!(ds.manifest(Split::GallerySat).unwrap().len(), 3);
    }
}
