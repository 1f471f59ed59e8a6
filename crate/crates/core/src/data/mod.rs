//! Datasets: manifests, the University-1652 directory loader, the
//! synthetic paired-view generator and satellite oversampling.

mod augment;
mod manifest;
mod store;
mod synthetic;
mod university;

pub use augment::{
    augment_image, oversample_satellite, AugmentConfig, AugmentParams, SatelliteDraw,
};
pub use manifest::{assert_disjoint, DatasetManifest, EntrySource, ManifestEntry, Split};
pub use store::{ImageStore, Normalization};
pub use synthetic::{
    derive_seed, generate_synthetic, materialize, render_view, Scene, SyntheticConfig,
    SyntheticDataset, ViewTransform,
};
pub use university::{load_split, load_university1652, split_dir, view_dir};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// `H x W x C` image tensor.
pub type Image = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Uav,
    Satellite,
}

impl View {
    pub fn opposite(self) -> View {
        match self {
            View::Uav => View::Satellite,
            View::Satellite => View::Uav,
        }
    }
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            View::Uav => "uav",
            View::Satellite => "satellite",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoSample {
    /// Pixel values in `[0, 1]` before normalization.
    pub image: Image,
    pub location_id: usize,
    pub view: View,
}

/// Convert an 8-bit RGB image to an `H x W x 3` tensor in `[0, 1]`.
pub fn rgb_to_tensor(img: &image::RgbImage) -> Image {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}
