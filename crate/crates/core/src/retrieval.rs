//! Descriptor ranking and Recall@K / AP evaluation for both retrieval
//! directions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageStore, View};
use crate::error::{Error, Result};
use crate::model::GeoModel;

pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    UavToSat,
    SatToUav,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::UavToSat, Direction::SatToUav];

    pub fn query_view(self) -> View {
        match self {
            Direction::UavToSat => View::Uav,
            Direction::SatToUav => View::Satellite,
        }
    }

    pub fn gallery_view(self) -> View {
        self.query_view().opposite()
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uav_to_sat" => Ok(Direction::UavToSat),
            "sat_to_uav" => Ok(Direction::SatToUav),
            other => Err(Error::Config(format!(
                "unknown direction `{other}` (expected uav_to_sat or sat_to_uav)"
            ))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::UavToSat => "uav_to_sat",
            Direction::SatToUav => "sat_to_uav",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub vec: Array1<f64>,
    pub sample_id: String,
    pub location_id: usize,
    pub view: View,
}

pub fn distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Gallery indices by ascending Euclidean distance to the query; equal
/// distances keep gallery order.
pub fn rank(query: &Array1<f64>, gallery: &[Array1<f64>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if let Some(g) = gallery.iter().find(|g| g.len() != query.len()) {
        return Err(Error::shape(
            "gallery descriptor length",
            query.len(),
            g.len(),
        ));
    }
    let dists: Vec<f64> = gallery.iter().map(|g| distance(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]));
    Ok(order)
}

/// Whether any relevant item appears among the first `k` ranked.
pub fn recall_at_k(ranked: &[usize], relevant: &[bool], k: usize) -> Result<bool> {
    if k == 0 {
        return Err(Error::InvalidCutoff(k));
    }
    Ok(ranked.iter().take(k).any(|&g| relevant[g]))
}

/// Mean of precision at each relevant hit. `None` without relevant items.
pub fn average_precision(ranked: &[usize], relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &g) in ranked.iter().enumerate() {
        if relevant[g] {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
            if hits == total {
                break;
            }
        }
    }
    Some(sum / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub sample_id: String,
    pub location_id: usize,
    /// 1-based rank of the first true match.
    pub first_match_rank: usize,
    pub ap: f64,
    /// Leading gallery sample ids.
    pub top: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Queries without any true match in the gallery; excluded from means.
    pub skipped_queries: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_ap: f64,
    pub per_query: Vec<QueryResult>,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Per-query rankings as CSV.
    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("query,location_id,first_match_rank,ap,top\n");
        for q in &self.per_query {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                q.sample_id,
                q.location_id,
                q.first_match_rank,
                q.ap,
                q.top.join(";")
            );
        }
        out
    }
}

/// Rank every query against the gallery and aggregate metrics.
pub fn evaluate_descriptors(
    queries: &[Descriptor],
    gallery: &[Descriptor],
    direction: Direction,
    cutoffs: &[usize],
    keep_top: usize,
) -> Result<RetrievalReport> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if let Some(&k) = cutoffs.iter().find(|&&k| k == 0) {
        return Err(Error::InvalidCutoff(k));
    }
    let mismatch = queries.iter().any(|q| q.view != direction.query_view())
        || gallery.iter().any(|g| g.view != direction.gallery_view());
    if mismatch {
        return Err(Error::Config(format!(
            "direction {direction} needs {} queries and a {} gallery",
            direction.query_view(),
            direction.gallery_view()
        )));
    }
    let vecs: Vec<Array1<f64>> = gallery.iter().map(|g| g.vec.clone()).collect();
    let results = queries
        .par_iter()
        .map(|q| -> Result<Option<(QueryResult, Vec<bool>)>> {
            let ranked = rank(&q.vec, &vecs)?;
            let relevant: Vec<bool> = gallery
                .iter()
                .map(|g| g.location_id == q.location_id)
                .collect();
            let Some(ap) = average_precision(&ranked, &relevant) else {
                return Ok(None);
            };
            let first = ranked
                .iter()
                .position(|&g| relevant[g])
                .expect("has a relevant item")
                + 1;
            let hits = cutoffs
                .iter()
                .map(|&k| recall_at_k(&ranked, &relevant, k))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some((
                QueryResult {
                    sample_id: q.sample_id.clone(),
                    location_id: q.location_id,
                    first_match_rank: first,
                    ap,
                    top: ranked
                        .iter()
                        .take(keep_top)
                        .map(|&g| gallery[g].sample_id.clone())
                        .collect(),
                },
                hits,
            )))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_query = Vec::new();
    let mut hit_counts = vec![0usize; cutoffs.len()];
    let mut skipped = 0;
    for r in results {
        match r {
            Some((q, hits)) => {
                for (c, h) in hit_counts.iter_mut().zip(hits) {
                    *c += usize::from(h);
                }
                per_query.push(q);
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} {direction} queries have no true match in the gallery; excluded");
    }
    let counted = per_query.len().max(1) as f64;
    let recall_at = cutoffs
        .iter()
        .zip(&hit_counts)
        .map(|(&k, &h)| (k, h as f64 / counted))
        .collect();
    let mean_ap = per_query.iter().map(|q| q.ap).sum::<f64>() / counted;
    Ok(RetrievalReport {
        direction,
        num_queries: queries.len(),
        num_gallery: gallery.len(),
        skipped_queries: skipped,
        recall_at,
        mean_ap,
        per_query,
    })
}

/// Descriptors for every entry of a store, in entry order.
pub fn extract_all(model: &GeoModel, store: &ImageStore) -> Result<Vec<Descriptor>> {
    let norm = &model.config.normalization;
    (0..store.len())
        .into_par_iter()
        .map(|i| {
            let e = store.entry(i);
            Ok(Descriptor {
                vec: model.extract_descriptor(&store.tensor(i, norm)?)?,
                sample_id: e.sample_id(),
                location_id: e.location_id,
                view: e.view,
            })
        })
        .collect()
}

/// Evaluate one direction. `queries` and `gallery` hold descriptors of the
/// matching views (extra views are filtered out).
pub fn evaluate(
    model: &GeoModel,
    queries: &ImageStore,
    gallery: &ImageStore,
    direction: Direction,
) -> Result<RetrievalReport> {
    let q: Vec<Descriptor> = extract_all(model, queries)?
        .into_iter()
        .filter(|d| d.view == direction.query_view())
        .collect();
    let g: Vec<Descriptor> = extract_all(model, gallery)?
        .into_iter()
        .filter(|d| d.view == direction.gallery_view())
        .collect();
    evaluate_descriptors(&q, &g, direction, &DEFAULT_CUTOFFS, 10)
}

/// Aligned text summary, one row per method, Recall@1 and AP (in %) per
/// direction.
pub fn summary_table(rows: &[(String, Vec<&RetrievalReport>)]) -> String {
    let cell = |r: Option<&&RetrievalReport>| match r {
        Some(r) => (
            format!("{:.2}", 100.0 * r.recall(1)),
            format!("{:.2}", 100.0 * r.mean_ap),
        ),
        None => ("-".into(), "-".into()),
    };
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:^19}  {:^19}",
        "Method", "UAV->Satellite", "Satellite->UAV"
    );
    let _ = writeln!(
        out,
        "{:<width$}  {:>9} {:>9}  {:>9} {:>9}",
        "", "Recall@1", "AP", "Recall@1", "AP"
    );
    for (name, reports) in rows {
        let u = cell(reports.iter().find(|r| r.direction == Direction::UavToSat));
        let s = cell(reports.iter().find(|r| r.direction == Direction::SatToUav));
        let _ = writeln!(
            out,
            "{name:<width$}  {:>9} {:>9}  {:>9} {:>9}",
            u.0, u.1, s.0, s.1
        );
    }
    out
}
