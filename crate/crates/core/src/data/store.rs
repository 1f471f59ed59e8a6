use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment_image, AugmentParams};
use super::manifest::{DatasetManifest, EntrySource, ManifestEntry};
use super::synthetic::render_entry;
use super::{rgb_to_tensor, Image};
use crate::error::{Error, Result};

/// Per-channel input standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    pub fn apply(&self, img: &mut Image) {
        for mut px in img.lanes_mut(ndarray::Axis(2)) {
            for (c, v) in px.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }

    /// Channel statistics over a set of `[0, 1]` images; falls back to
    /// `0.5 / 0.5` when empty or a channel is constant.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0usize;
        for img in images {
            for px in img.lanes(ndarray::Axis(2)) {
                for c in 0..3 {
                    sum[c] += px[c];
                    sq[c] += px[c] * px[c];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Self::default();
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
        }
        if std.iter().any(|&s| s < 1e-6) {
            return Self::default();
        }
        Self { mean, std }
    }
}

/// Decoded, resized images for the entries of one manifest.
///
/// Images are kept in `[0, 1]`; normalization is applied on access.
#[derive(Debug, Clone)]
pub struct ImageStore {
    pub manifest: DatasetManifest,
    base: PathBuf,
    size: (usize, usize),
    cache: Option<Vec<Image>>,
}

fn load_rgb(entry: &ManifestEntry, base: &Path, (h, w): (usize, usize)) -> Result<RgbImage> {
    let img = match &entry.source {
        EntrySource::Path(p) => {
            let path = base.join(p);
            image::open(&path)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?
                .to_rgb8()
        }
        EntrySource::Synthetic {
            seed,
            location,
            view_index,
        } => {
            if h == w {
                return Ok(render_entry(*seed, *location, *view_index, h));
            }
            render_entry(*seed, *location, *view_index, h.max(w))
        }
    };
    if img.dimensions() == (w as u32, h as u32) {
        Ok(img)
    } else {
        Ok(image::imageops::resize(
            &img,
            w as u32,
            h as u32,
            FilterType::Triangle,
        ))
    }
}

impl ImageStore {
    /// `size` is `(height, width)`; relative paths resolve against `base`.
    /// With `preload`, every image is decoded up front (in parallel).
    pub fn new(
        manifest: DatasetManifest,
        base: impl Into<PathBuf>,
        size: (usize, usize),
        preload: bool,
    ) -> Result<Self> {
        let base = base.into();
        let cache = if preload {
            let images = manifest
                .entries
                .par_iter()
                .map(|e| load_rgb(e, &base, size).map(|img| rgb_to_tensor(&img)))
                .collect::<Result<Vec<_>>>()?;
            Some(images)
        } else {
            None
        };
        Ok(Self {
            manifest,
            base,
            size,
            cache,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn entry(&self, i: usize) -> &ManifestEntry {
        &self.manifest.entries[i]
    }

    /// Raw `[0, 1]` tensor of entry `i`.
    pub fn raw(&self, i: usize) -> Result<Image> {
        match &self.cache {
            Some(c) => Ok(c[i].clone()),
            None => Ok(rgb_to_tensor(&load_rgb(
                &self.manifest.entries[i],
                &self.base,
                self.size,
            )?)),
        }
    }

    pub fn tensor(&self, i: usize, norm: &Normalization) -> Result<Image> {
        let mut img = self.raw(i)?;
        norm.apply(&mut img);
        Ok(img)
    }

    pub fn augmented(
        &self,
        i: usize,
        params: &AugmentParams,
        norm: &Normalization,
    ) -> Result<Image> {
        let mut img = augment_image(&self.raw(i)?, params);
        norm.apply(&mut img);
        Ok(img)
    }

    /// Channel statistics over up to `limit` entries (first in order).
    pub fn normalization(&self, limit: usize) -> Result<Normalization> {
        let images = (0..self.len().min(limit))
            .map(|i| self.raw(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Normalization::from_images(images.iter()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn constant_images_fall_back() {
        let img = Array3::from_elem((2, 2, 3), 0.3);
        assert_eq!(Normalization::from_images([&img]), Normalization::default());
        assert_eq!(
            Normalization::from_images(std::iter::empty()),
            Normalization::default()
        );
    }

    #[test]
    fn normalization_standardizes_channels() {
        let img = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| {
            (y * 4 + x) as f64 / 16.0 + c as f64 * 0.01
        });
        let n = Normalization::from_images([&img]);
        let mut out = img.clone();
        n.apply(&mut out);
        for c in 0..3 {
            let ch = out.index_axis(ndarray::Axis(2), c);
            assert!(ch.mean().unwrap().abs() < 1e-12);
            assert!((ch.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
