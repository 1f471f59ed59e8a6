//! Per-part attention maps: the raw `K x N` weights as CSV and one
//! grayscale heatmap per part on the patch grid.

use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::{Array2, ArrayView1};

use crate::data::{rgb_to_tensor, Image};
use crate::error::{Error, Result};
use crate::model::GeoModel;

/// One row per part, one column per patch (raster order).
pub fn attention_to_csv(weights: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in weights.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_attention_csv(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                let v: f64 = c.trim().parse().map_err(|_| {
                    Error::Config(format!(
                        "attention CSV line {}: `{c}` is not a number",
                        i + 1
                    ))
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Config(format!(
                        "attention CSV line {}: non-finite value",
                        i + 1
                    )))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::shape(
                    format!("attention CSV line {}", i + 1),
                    first.len(),
                    row.len(),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config("attention CSV is empty".into()));
    }
    let cols = rows[0].len();
    Ok(Array2::from_shape_vec((rows.len(), cols), rows.concat()).expect("rectangular"))
}

/// Min-max scaled heatmap of one part; a constant row maps to white.
pub fn heatmap(row: ArrayView1<'_, f64>, grid: (usize, usize)) -> Result<GrayImage> {
    let (gh, gw) = grid;
    if row.len() != gh * gw {
        return Err(Error::shape("attention row length", gh * gw, row.len()));
    }
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    Ok(GrayImage::from_fn(gw as u32, gh as u32, |x, y| {
        let v = row[y as usize * gw + x as usize];
        let t = if span > 0.0 { (v - min) / span } else { 1.0 };
        image::Luma([(t * 255.0).round() as u8])
    }))
}

/// Write `attention.csv` and `part_{k}.png` for every part into `dir`.
pub fn write_attention(
    weights: &Array2<f64>,
    grid: (usize, usize),
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let maps = weights
        .rows()
        .into_iter()
        .map(|r| heatmap(r, grid))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("attention.csv");
    std::fs::write(&csv, attention_to_csv(weights)).map_err(|e| Error::io(&csv, e))?;
    let mut written = vec![csv];
    for (k, map) in maps.iter().enumerate() {
        let path = dir.join(format!("part_{k}.png"));
        map.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

/// Attention weights of `image` (already normalized) under `model`.
pub fn attention_for_image(model: &GeoModel, image: &Image) -> Result<Array2<f64>> {
    Ok(model.forward_sample(image)?.parts.attention.weights)
}

/// Load an image file for `model`; its size must match the backbone input.
pub fn load_model_image(model: &GeoModel, path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let b = &model.config.backbone;
    let (w, h) = img.dimensions();
    if (h as usize, w as usize) != (b.image_height, b.image_width) {
        return Err(Error::shape(
            format!("image {}", path.display()),
            format!("{}x{}", b.image_width, b.image_height),
            format!("{w}x{h}"),
        ));
    }
    let mut t = rgb_to_tensor(&img);
    model.config.normalization.apply(&mut t);
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asa::{asa_forward, PartitionSpec};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Array2::from_shape_simple_fn((3, 16), || rng.random::<f64>());
        assert_eq!(parse_attention_csv(&attention_to_csv(&w)).unwrap(), w);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(parse_attention_csv("").is_err());
        assert!(parse_attention_csv("1,2\n3\n").is_err());
        assert!(parse_attention_csv("1,x\n").is_err());
        assert!(parse_attention_csv("1,NaN\n").is_err());
    }

    #[test]
    fn anchor_cell_is_brightest() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Array2::from_shape_simple_fn((16, 4), || rng.random_range(-1.0..1.0));
        let parts = asa_forward(p.view(), &PartitionSpec::default()).unwrap();
        for (k, &a) in parts.anchor_indices.iter().enumerate() {
            let map = heatmap(parts.attention.weights.row(k), (4, 4)).unwrap();
            assert_eq!(map.get_pixel((a % 4) as u32, (a / 4) as u32)[0], 255);
        }
    }

    #[test]
    fn files_reload_to_identical_heatmaps() {
        let dir = tempfile::tempdir().unwrap();
        let w = array![[1.0, 0.5, 0.25, 0.0], [0.1, 0.2, 0.3, 0.3]];
        let files = write_attention(&w, (2, 2), dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let back = parse_attention_csv(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
        for k in 0..2 {
            let saved = image::open(&files[k + 1]).unwrap().to_luma8();
            assert_eq!(saved, heatmap(back.row(k), (2, 2)).unwrap());
        }
        assert!(heatmap(w.row(0), (3, 3)).is_err());
        assert_eq!(
            heatmap(array![0.4, 0.4].view(), (1, 2))
                .unwrap()
                .get_pixel(0, 0)[0],
            255
        );
    }
}
