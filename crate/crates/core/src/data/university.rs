use std::fs;
use std::path::{Path, PathBuf};

use super::manifest::{assert_disjoint, DatasetManifest, EntrySource, ManifestEntry, Split};
use super::View;
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "JPG"];

const EXPECTED_LAYOUT: &str = "expected <root>/train/{drone,satellite}/<class_id>/*.jpg and \
<root>/test/{query_drone,query_satellite,gallery_drone,gallery_satellite}/<class_id>/*.jpg";

/// Directory (relative to the dataset root) holding a split.
pub fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        _ => "test",
    }
}

/// View sub-directory names of a split, in the order they are scanned.
pub fn view_dir(split: Split, view: View) -> Option<&'static str> {
    match (split, view) {
        (Split::Train, View::Uav) => Some("drone"),
        (Split::Train, View::Satellite) => Some("satellite"),
        (Split::QueryUav, View::Uav) => Some("query_drone"),
        (Split::QuerySat, View::Satellite) => Some("query_satellite"),
        (Split::GalleryUav, View::Uav) => Some("gallery_drone"),
        (Split::GallerySat, View::Satellite) => Some("gallery_satellite"),
        _ => None,
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    Ok(paths)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e))
}

fn scan_view(dir: &Path, view: View, entries: &mut Vec<ManifestEntry>) -> Result<()> {
    for class_dir in read_dir_sorted(dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        let name = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let location_id: usize = name.parse().map_err(|_| {
            Error::Dataset(format!(
                "class directory {} is not a numeric location id",
                class_dir.display()
            ))
        })?;
        let images: Vec<PathBuf> = read_dir_sorted(&class_dir)?
            .into_iter()
            .filter(|p| is_image(p))
            .collect();
        if images.is_empty() {
            log::warn!("skipping empty class directory {}", class_dir.display());
            continue;
        }
        entries.extend(images.into_iter().map(|path| ManifestEntry {
            source: EntrySource::Path(path),
            location_id,
            view,
        }));
    }
    Ok(())
}

/// Build the manifest of one split of a University-1652-style tree.
pub fn load_split(root: &Path, split: Split) -> Result<DatasetManifest> {
    let base = root.join(split_dir(split));
    let mut entries = Vec::new();
    let mut found = false;
    for view in [View::Uav, View::Satellite] {
        let Some(sub) = view_dir(split, view) else {
            continue;
        };
        let dir = base.join(sub);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "missing {} for split {split:?}; {EXPECTED_LAYOUT}",
                dir.display()
            )));
        }
        found = true;
        scan_view(&dir, view, &mut entries)?;
    }
    debug_assert!(found);
    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found for split {split:?} under {}; {EXPECTED_LAYOUT}",
            root.display()
        )));
    }
    Ok(DatasetManifest::new(split, entries))
}

/// Load a split and, for test splits, check that its locations are
/// disjoint from the training split when one is present.
pub fn load_university1652(root: &Path, split: Split) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist; {EXPECTED_LAYOUT}",
            root.display()
        )));
    }
    let manifest = load_split(root, split)?;
    if split.is_test() && root.join("train").is_dir() {
        let train = load_split(root, Split::Train)?;
        assert_disjoint(&train, &manifest)?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, b"").unwrap();
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_university1652(dir.path(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");
    }

    #[test]
    fn parses_layout_and_skips_empty_classes() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for c in ["0001", "0002"] {
            touch(&root.join(format!("train/satellite/{c}/{c}.jpg")));
            for i in 0..3 {
                touch(&root.join(format!("train/drone/{c}/image-{i:02}.jpeg")));
            }
        }
        fs::create_dir_all(root.join("train/drone/0003")).unwrap();
        touch(&root.join("train/drone/0002/notes.txt"));
        let m = load_university1652(root, Split::Train).unwrap();
        assert_eq!(m.len(), 8);
        assert_eq!(m.locations().into_iter().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(m.filter_view(View::Satellite).len(), 2);
    }

    #[test]
    fn gallery_counts_include_distractors() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for c in 0..951 {
            touch(&root.join(format!(
                "test/gallery_satellite/{:04}/{:04}.jpg",
                c + 1000,
                c + 1000
            )));
        }
        for c in 0..701 {
            touch(&root.join(format!("train/satellite/{c:04}/{c:04}.jpg")));
            touch(&root.join(format!("train/drone/{c:04}/image-01.jpeg")));
        }
        let train = load_university1652(root, Split::Train).unwrap();
        assert_eq!(train.locations().len(), 701);
        let gallery = load_university1652(root, Split::GallerySat).unwrap();
        assert_eq!(gallery.locations().len(), 951);
    }

    #[test]
    fn overlapping_test_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch(&root.join("train/satellite/0001/a.jpg"));
        touch(&root.join("train/drone/0001/a.jpg"));
        touch(&root.join("test/query_drone/0001/a.jpg"));
        assert!(load_university1652(root, Split::QueryUav).is_err());
    }

    #[test]
    fn missing_split_names_the_layout() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("train/drone/0001/a.jpg"));
        let err = load_university1652(dir.path(), Split::Train)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("satellite") && err.contains("expected"),
            "{err}"
        );
    }
}
