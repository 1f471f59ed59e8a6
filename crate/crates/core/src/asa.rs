//! Adaptive semantic aggregation of patch tokens into part features.
//!
//! Patch tokens are compressed to one scalar each (feature mean), the
//! scalars are clustered with 1-D k-means seeded from evenly spaced ranks,
//! and every cluster center picks the patch with the nearest scalar as the
//! part anchor. Each part then weights *all* patches by a cosine falloff of
//! their D-dimensional Euclidean distance to the anchor and takes the
//! weighted mean. Two hard-partition baselines (rank-uniform groups and
//! k-means groups) share the same aggregation with one-hot weights.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SoftKmeans,
    HardKmeans,
    HardUniform,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft_kmeans" => Ok(Strategy::SoftKmeans),
            "hard_kmeans" => Ok(Strategy::HardKmeans),
            "hard_uniform" => Ok(Strategy::HardUniform),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected soft_kmeans, hard_kmeans or hard_uniform)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::SoftKmeans => "soft_kmeans",
            Strategy::HardKmeans => "hard_kmeans",
            Strategy::HardUniform => "hard_uniform",
        })
    }
}

/// Whether gradients flow through the distance-based attention weights or
/// only through the aggregation at fixed weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionGrad {
    #[default]
    Flow,
    Detach,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Converged once no center moves farther than this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_parts: usize,
    pub alpha: f64,
    pub beta: f64,
    pub strategy: Strategy,
    #[serde(default)]
    pub attention_grad: AttentionGrad,
    #[serde(default)]
    pub kmeans: KMeansOptions,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            num_parts: 2,
            alpha: 1.0,
            beta: 0.0,
            strategy: Strategy::SoftKmeans,
            attention_grad: AttentionGrad::Flow,
            kmeans: KMeansOptions::default(),
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_parts == 0 {
            return Err(Error::InvalidPartition(
                "num_parts must be at least 1".into(),
            ));
        }
        if !(self.alpha > 0.0)
            || !(self.beta >= 0.0)
            || !self.alpha.is_finite()
            || !self.beta.is_finite()
        {
            return Err(Error::InvalidPartition(format!(
                "need alpha > 0 and beta >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Per-patch feature means.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticScalars {
    pub q: Vec<f64>,
}

/// Part-to-patch weights (`K x N`) plus the distance bookkeeping needed to
/// differentiate them.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub weights: Array2<f64>,
    /// `K x N` Euclidean distances to each anchor; empty for one-hot rows.
    pub distances: Array2<f64>,
    /// Per row: column attaining the minimum distance (lowest index on ties).
    pub nearest: Vec<usize>,
    /// Per row: column attaining the maximum distance (lowest index on ties).
    pub farthest: Vec<usize>,
}

impl AttentionMatrix {
    pub fn num_parts(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_patches(&self) -> usize {
        self.weights.ncols()
    }

    /// One-hot rows from a hard assignment of patches to parts.
    pub fn one_hot(assignments: &[usize], num_parts: usize) -> Self {
        let mut weights = Array2::zeros((num_parts, assignments.len()));
        for (i, &k) in assignments.iter().enumerate() {
            weights[[k, i]] = 1.0;
        }
        Self {
            weights,
            distances: Array2::zeros((0, 0)),
            nearest: Vec::new(),
            farthest: Vec::new(),
        }
    }

    fn is_distance_based(&self) -> bool {
        !self.distances.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartFeatures {
    /// `K x D` aggregated part features.
    pub rho: Array2<f64>,
    pub anchor_indices: Vec<usize>,
    pub attention: AttentionMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Within-cluster SSE after every center update.
    pub sse_history: Vec<f64>,
}

pub fn compress(patch_tokens: ArrayView2<'_, f64>) -> SemanticScalars {
    let d = patch_tokens.ncols() as f64;
    SemanticScalars {
        q: patch_tokens
            .rows()
            .into_iter()
            .map(|r| r.sum() / d)
            .collect(),
    }
}

/// Patch indices sorted by descending `q`, ties by ascending index.
pub fn descending_order(q: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    order
}

/// 1-based positions `floor((2k - 1) N / 2K)` for `k = 1..=K`, clamped to
/// `[1, N]`.
pub fn init_center_positions(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidPartition(format!(
            "cannot form {k} parts from {n} patches"
        )));
    }
    Ok((1..=k)
        .map(|j| ((2 * j - 1) * n / (2 * k)).clamp(1, n))
        .collect())
}

/// Initial k-means centers: the scalars of the patches at the seed
/// positions of the descending sequence.
pub fn init_centers(q: &[f64], k: usize) -> Result<Vec<f64>> {
    let order = descending_order(q);
    Ok(init_center_positions(q.len(), k)?
        .into_iter()
        .map(|pos| q[order[pos - 1]])
        .collect())
}

fn nearest_center(v: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (j, &c) in centers.iter().enumerate() {
        let d = (v - c).abs();
        if d < best_dist {
            best_dist = d;
            best = j;
        }
    }
    best
}

fn cluster_sse(q: &[f64], assignments: &[usize], centers: &[f64]) -> f64 {
    q.iter()
        .zip(assignments)
        .map(|(&v, &a)| (v - centers[a]) * (v - centers[a]))
        .sum()
}

/// Move the point farthest from its center into each empty cluster.
fn reseed_empty(q: &[f64], assignments: &mut [usize], centers: &[f64]) {
    let k = centers.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut donor = None;
        let mut worst = f64::NEG_INFINITY;
        for (i, &a) in assignments.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let d = (q[i] - centers[a]).abs();
            if d > worst {
                worst = d;
                donor = Some(i);
            }
        }
        // k <= n guarantees some cluster holds two or more points
        let i = donor.expect("an empty cluster implies a cluster with >= 2 points");
        assignments[i] = empty;
    }
}

fn cluster_means(q: &[f64], assignments: &[usize], k: usize) -> Vec<f64> {
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&v, &a) in q.iter().zip(assignments) {
        sums[a] += v;
        counts[a] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| s / c as f64)
        .collect()
}

/// Lloyd's algorithm on scalars.
///
/// Ties between equidistant centers go to the lower center index. Empty
/// clusters are refilled with the point farthest from its own center. The
/// returned centers are the means of the returned assignments.
pub fn kmeans_1d(q: &[f64], init: &[f64], opts: &KMeansOptions) -> Result<KMeansResult> {
    let k = init.len();
    let n = q.len();
    if k == 0 || k > n {
        return Err(Error::InvalidPartition(format!(
            "cannot form {k} clusters from {n} values"
        )));
    }
    let mut centers = init.to_vec();
    let mut assignments: Vec<usize> = q.iter().map(|&v| nearest_center(v, &centers)).collect();
    reseed_empty(q, &mut assignments, &centers);

    let mut sse_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let updated = cluster_means(q, &assignments, k);
        let moved = updated
            .iter()
            .zip(&centers)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        centers = updated;
        sse_history.push(cluster_sse(q, &assignments, &centers));

        let mut next: Vec<usize> = q.iter().map(|&v| nearest_center(v, &centers)).collect();
        reseed_empty(q, &mut next, &centers);
        if next == assignments || moved <= opts.tol {
            converged = true;
            break;
        }
        assignments = next;
    }
    if !converged {
        // keep centers consistent with the final assignment
        centers = cluster_means(q, &assignments, k);
    }
    Ok(KMeansResult {
        assignments,
        centers,
        iterations,
        converged,
        sse_history,
    })
}

/// For each center, the patch whose scalar is nearest (lowest index on
/// ties).
pub fn select_anchors(q: &[f64], centers: &[f64]) -> Vec<usize> {
    centers
        .iter()
        .map(|&c| {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (i, &v) in q.iter().enumerate() {
                let d = (v - c).abs();
                if d < best_dist {
                    best_dist = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `A[k][i] = alpha * cos((d_ki - d_min) / (d_max - d_min) * pi/2) + beta`
/// with `d_ki = |P_i - P_anchor_k|`. A row whose distances are all equal
/// is set to `alpha + beta`.
pub fn compute_attention(
    patch_tokens: ArrayView2<'_, f64>,
    anchor_indices: &[usize],
    spec: &PartitionSpec,
) -> Result<AttentionMatrix> {
    let n = patch_tokens.nrows();
    let k = anchor_indices.len();
    if let Some(&bad) = anchor_indices.iter().find(|&&a| a >= n) {
        return Err(Error::InvalidPartition(format!(
            "anchor index {bad} out of range for {n} patches"
        )));
    }
    let mut distances = Array2::zeros((k, n));
    let mut weights = Array2::zeros((k, n));
    let mut nearest = Vec::with_capacity(k);
    let mut farthest = Vec::with_capacity(k);
    for (part, &anchor) in anchor_indices.iter().enumerate() {
        let a = patch_tokens.row(anchor);
        for (i, p) in patch_tokens.rows().into_iter().enumerate() {
            distances[[part, i]] = p
                .iter()
                .zip(a.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
        let row = distances.row(part);
        let (mut lo, mut hi) = (0, 0);
        for (i, &d) in row.iter().enumerate() {
            if d < row[lo] {
                lo = i;
            }
            if d > row[hi] {
                hi = i;
            }
        }
        nearest.push(lo);
        farthest.push(hi);
        let (dmin, dmax) = (row[lo], row[hi]);
        let range = dmax - dmin;
        for i in 0..n {
            weights[[part, i]] = if range > 0.0 {
                let t = (distances[[part, i]] - dmin) / range;
                spec.alpha * (t * FRAC_PI_2).cos() + spec.beta
            } else {
                spec.alpha + spec.beta
            };
        }
    }
    Ok(AttentionMatrix {
        weights,
        distances,
        nearest,
        farthest,
    })
}

/// `rho_k = sum_i A[k][i] P_i / sum_i A[k][i]`.
pub fn aggregate(
    patch_tokens: ArrayView2<'_, f64>,
    attention: &AttentionMatrix,
) -> Result<Array2<f64>> {
    let a = &attention.weights;
    if a.ncols() != patch_tokens.nrows() {
        return Err(Error::shape(
            "attention columns vs patch count",
            patch_tokens.nrows(),
            a.ncols(),
        ));
    }
    let sums = a.sum_axis(Axis(1));
    if let Some((part, &sum)) = sums.iter().enumerate().find(|(_, &s)| !(s > 0.0)) {
        return Err(Error::DegenerateAggregation { part, sum });
    }
    Ok(a.dot(&patch_tokens) / &sums.insert_axis(Axis(1)))
}

/// Rank patches by descending `q` and cut the ranking into `K` contiguous
/// groups of `N / K`; the `N mod K` leftover patches go one each to the
/// last groups.
pub fn hard_partition_uniform(q: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = q.len();
    if k == 0 || k > n {
        return Err(Error::InvalidPartition(format!(
            "cannot form {k} parts from {n} patches"
        )));
    }
    let base = n / k;
    let extra = n % k;
    let order = descending_order(q);
    let mut assignments = vec![0; n];
    let mut rank = 0;
    for part in 0..k {
        let size = base + usize::from(part >= k - extra);
        for &patch in &order[rank..rank + size] {
            assignments[patch] = part;
        }
        rank += size;
    }
    Ok(assignments)
}

pub fn hard_partition_kmeans(q: &[f64], k: usize, opts: &KMeansOptions) -> Result<KMeansResult> {
    kmeans_1d(q, &init_centers(q, k)?, opts)
}

fn group_means(q: &[f64], assignments: &[usize], k: usize) -> Vec<f64> {
    cluster_means(q, assignments, k)
}

/// Full part-feature extraction for one image's patch tokens.
pub fn asa_forward(
    patch_tokens: ArrayView2<'_, f64>,
    spec: &PartitionSpec,
) -> Result<PartFeatures> {
    spec.validate()?;
    let n = patch_tokens.nrows();
    let k = spec.num_parts;
    if k > n {
        return Err(Error::InvalidPartition(format!(
            "cannot form {k} parts from {n} patches"
        )));
    }
    let q = compress(patch_tokens).q;
    let (anchor_indices, attention) = match spec.strategy {
        Strategy::SoftKmeans => {
            let km = hard_partition_kmeans(&q, k, &spec.kmeans)?;
            let anchors = select_anchors(&q, &km.centers);
            let attention = compute_attention(patch_tokens, &anchors, spec)?;
            (anchors, attention)
        }
        Strategy::HardKmeans => {
            let km = hard_partition_kmeans(&q, k, &spec.kmeans)?;
            let anchors = select_anchors(&q, &km.centers);
            (anchors, AttentionMatrix::one_hot(&km.assignments, k))
        }
        Strategy::HardUniform => {
            let assignments = hard_partition_uniform(&q, k)?;
            let anchors = select_anchors(&q, &group_means(&q, &assignments, k));
            (anchors, AttentionMatrix::one_hot(&assignments, k))
        }
    };
    let rho = aggregate(patch_tokens, &attention)?;
    Ok(PartFeatures {
        rho,
        anchor_indices,
        attention,
    })
}

/// Gradient of the part features with respect to the patch tokens, with
/// anchors and cluster assignments held fixed.
///
/// With [`AttentionGrad::Flow`], the distance-based weights are
/// differentiated too (through every patch, the anchor row and the rows
/// attaining the per-part min/max distance). One-hot weights carry no
/// gradient.
pub fn asa_backward(
    patch_tokens: ArrayView2<'_, f64>,
    parts: &PartFeatures,
    spec: &PartitionSpec,
    d_rho: &Array2<f64>,
) -> Array2<f64> {
    let a = &parts.attention.weights;
    let sums = a.sum_axis(Axis(1)).insert_axis(Axis(1));
    let normalized = a / &sums;
    let mut dp = normalized.t().dot(d_rho);

    if spec.attention_grad == AttentionGrad::Detach || !parts.attention.is_distance_based() {
        return dp;
    }

    // dA[k][i] = (P_i - rho_k) . drho_k / S_k
    let proj = d_rho.dot(&patch_tokens.t());
    let self_dot: Array1<f64> = (d_rho * &parts.rho).sum_axis(Axis(1));
    let da = (proj - &self_dot.insert_axis(Axis(1))) / &sums;

    let att = &parts.attention;
    let n = patch_tokens.nrows();
    for (part, &anchor) in parts.anchor_indices.iter().enumerate() {
        let lo = att.nearest[part];
        let hi = att.farthest[part];
        let dmin = att.distances[[part, lo]];
        let dmax = att.distances[[part, hi]];
        let range = dmax - dmin;
        if !(range > 0.0) {
            continue;
        }
        let mut g_dis = vec![0.0; n];
        let (mut g_max, mut g_min) = (0.0, 0.0);
        for i in 0..n {
            let d = att.distances[[part, i]];
            let t = (d - dmin) / range;
            let g_t = da[[part, i]] * (-spec.alpha * FRAC_PI_2 * (t * FRAC_PI_2).sin());
            g_dis[i] += g_t / range;
            g_max -= g_t * (d - dmin) / (range * range);
            g_min += g_t * (d - dmax) / (range * range);
        }
        g_dis[hi] += g_max;
        g_dis[lo] += g_min;

        let anchor_row = patch_tokens.row(anchor).to_owned();
        for (i, &g) in g_dis.iter().enumerate() {
            let d = att.distances[[part, i]];
            if g == 0.0 || !(d > 0.0) {
                continue;
            }
            let dir = (&patch_tokens.row(i) - &anchor_row) * (g / d);
            let mut row = dp.row_mut(i);
            row += &dir;
            let mut arow = dp.row_mut(anchor);
            arow -= &dir;
        }
    }
    dp
}
