use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::View;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    QueryUav,
    QuerySat,
    GalleryUav,
    GallerySat,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::QueryUav,
        Split::QuerySat,
        Split::GalleryUav,
        Split::GallerySat,
    ];

    pub fn is_test(self) -> bool {
        self != Split::Train
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query_uav" => Ok(Split::QueryUav),
            "query_sat" => Ok(Split::QuerySat),
            "gallery_uav" => Ok(Split::GalleryUav),
            "gallery_sat" => Ok(Split::GallerySat),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    Path(PathBuf),
    /// Rendered on demand from the synthetic generator.
    Synthetic {
        seed: u64,
        location: usize,
        view_index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub source: EntrySource,
    pub location_id: usize,
    pub view: View,
}

impl ManifestEntry {
    /// Short id used in diagnostics and reports.
    pub fn sample_id(&self) -> String {
        match &self.source {
            EntrySource::Path(p) => p.display().to_string(),
            EntrySource::Synthetic {
                location,
                view_index,
                ..
            } => format!("synthetic/{location:04}/{}-{view_index:02}", self.view),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(split: Split, entries: Vec<ManifestEntry>) -> Self {
        Self { split, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn locations(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.location_id).collect()
    }

    /// Dense class labels `0..C` in ascending location-id order.
    pub fn label_map(&self) -> BTreeMap<usize, usize> {
        self.locations()
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l, i))
            .collect()
    }

    pub fn view_entries(&self, view: View) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.view == view)
    }

    pub fn filter_view(&self, view: View) -> DatasetManifest {
        DatasetManifest {
            split: self.split,
            entries: self
                .entries
                .iter()
                .filter(|e| e.view == view)
                .cloned()
                .collect(),
        }
    }

    /// Entries indices of each view grouped by location.
    pub fn by_location(&self, view: View) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.view_entries(view) {
            map.entry(e.location_id).or_default().push(i);
        }
        map
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Training and test locations must not overlap.
pub fn assert_disjoint(train: &DatasetManifest, test: &DatasetManifest) -> Result<()> {
    let overlap: Vec<usize> = train
        .locations()
        .intersection(&test.locations())
        .copied()
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!(
            "train and {:?} share {} location(s), e.g. {:?}",
            test.split,
            overlap.len(),
            &overlap[..overlap.len().min(5)]
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(loc: usize, view: View) -> ManifestEntry {
        ManifestEntry {
            source: EntrySource::Path(PathBuf::from(format!("{loc}.png"))),
            location_id: loc,
            view,
        }
    }

    #[test]
    fn json_round_trip() {
        let m = DatasetManifest::new(
            Split::Train,
            vec![
                entry(3, View::Uav),
                ManifestEntry {
                    source: EntrySource::Synthetic {
                        seed: 7,
                        location: 1,
                        view_index: 0,
                    },
                    location_id: 1,
                    view: View::Satellite,
                },
            ],
        );
        assert_eq!(
            DatasetManifest::from_json(&m.to_json().unwrap()).unwrap(),
            m
        );
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let s = r#"{"split":"train","entries":[],"extra":1}"#;
        assert!(DatasetManifest::from_json(s).is_err());
    }

    #[test]
    fn disjointness_is_enforced() {
        let train =
            DatasetManifest::new(Split::Train, vec![entry(1, View::Uav), entry(2, View::Uav)]);
        let ok = DatasetManifest::new(Split::QueryUav, vec![entry(3, View::Uav)]);
        let bad = DatasetManifest::new(Split::QueryUav, vec![entry(2, View::Uav)]);
        assert!(assert_disjoint(&train, &ok).is_ok());
        assert!(assert_disjoint(&train, &bad).is_err());
    }

    #[test]
    fn labels_are_dense_in_id_order() {
        let m = DatasetManifest::new(
            Split::Train,
            vec![entry(40, View::Uav), entry(7, View::Satellite)],
        );
        let map = m.label_map();
        assert_eq!(map[&7], 0);
        assert_eq!(map[&40], 1);
    }
}
