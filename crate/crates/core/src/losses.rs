//! Cross-entropy and cross-view triplet objectives.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::data::View;
use crate::error::{Error, Result};

/// Softmax cross entropy of one logit row, with its gradient.
pub fn softmax_cross_entropy(
    logits: ArrayView1<'_, f64>,
    label: usize,
) -> Result<(f64, Array1<f64>)> {
    let c = logits.len();
    if label >= c {
        return Err(Error::InvalidLabel {
            label,
            num_classes: c,
        });
    }
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let shifted = logits.mapv(|v| v - max);
    let log_sum = shifted.mapv(f64::exp).sum().ln();
    let loss = log_sum - shifted[label];
    let mut grad = shifted.mapv(|v| (v - log_sum).exp());
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean softmax cross entropy over the rows of `logits` (one row per head).
pub fn ce_loss(logits: ArrayView2<'_, f64>, label: usize) -> Result<f64> {
    Ok(ce_loss_with_grad(logits, label)?.0)
}

pub fn ce_loss_with_grad(logits: ArrayView2<'_, f64>, label: usize) -> Result<(f64, Array2<f64>)> {
    let heads = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (row, mut g) in logits.rows().into_iter().zip(grad.rows_mut()) {
        let (l, d) = softmax_cross_entropy(row, label)?;
        total += l;
        g.assign(&(d / heads));
    }
    Ok((total / heads, grad))
}

pub fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Unit direction `(a - b) / |a - b|`, zero when the points coincide.
fn direction(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, dist: f64) -> Array1<f64> {
    if dist > 0.0 {
        (&a - &b) / dist
    } else {
        Array1::zeros(a.len())
    }
}

/// `mean_k max(d(a_k, p_k) - d(a_k, n_k) + margin, 0)` over aligned rows.
pub fn triplet_loss(
    anchor: ArrayView2<'_, f64>,
    positive: ArrayView2<'_, f64>,
    negative: ArrayView2<'_, f64>,
    margin: f64,
) -> f64 {
    let heads = anchor.nrows();
    let total: f64 = (0..heads)
        .map(|k| {
            let dp = euclidean(anchor.row(k), positive.row(k));
            let dn = euclidean(anchor.row(k), negative.row(k));
            (dp - dn + margin).max(0.0)
        })
        .sum();
    total / heads as f64
}

pub fn total_loss(ce: f64, triplet: f64) -> f64 {
    ce + triplet
}

/// Metadata the in-batch triplet miner needs per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleTag {
    pub location: usize,
    pub view: View,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchTriplet {
    pub loss: f64,
    /// Per head, `B x A` gradient w.r.t. the features.
    pub grads: Vec<Array2<f64>>,
    /// Per head, per anchor sample: `(positive, negative)` indices, `None`
    /// when the sample has no positive or no negative in the batch.
    pub mined: Vec<Vec<Option<(usize, usize)>>>,
}

/// Cross-view triplet loss with hardest in-batch negative mining.
///
/// `features[h]` is the `B x A` matrix of head `h`; only heads in
/// `heads` contribute. Every sample is an anchor. Its positive is the first
/// opposite-view sample of the same location; its negative, per head, is
/// the nearest opposite-view sample of a different location. The loss is
/// the mean over anchors of the mean over heads.
pub fn batch_triplet(
    features: &[Array2<f64>],
    tags: &[SampleTag],
    heads: std::ops::Range<usize>,
    margin: f64,
) -> BatchTriplet {
    let b = tags.len();
    let mut grads: Vec<Array2<f64>> = features
        .iter()
        .map(|f| Array2::zeros(f.raw_dim()))
        .collect();
    let mut mined = vec![vec![None; b]; features.len()];
    let num_heads = heads.len() as f64;
    let anchors: Vec<(usize, usize)> = (0..b)
        .filter_map(|a| {
            (0..b)
                .find(|&p| tags[p].location == tags[a].location && tags[p].view != tags[a].view)
                .map(|p| (a, p))
        })
        .collect();
    let mut total = 0.0;
    let mut counted = 0usize;
    for &(a, p) in &anchors {
        let negatives: Vec<usize> = (0..b)
            .filter(|&n| tags[n].view != tags[a].view && tags[n].location != tags[a].location)
            .collect();
        if negatives.is_empty() {
            continue;
        }
        counted += 1;
        for h in heads.clone() {
            let f = &features[h];
            let dp = euclidean(f.row(a), f.row(p));
            let (n, dn) = negatives
                .iter()
                .map(|&n| (n, euclidean(f.row(a), f.row(n))))
                .fold((usize::MAX, f64::INFINITY), |best, cur| {
                    if cur.1 < best.1 {
                        cur
                    } else {
                        best
                    }
                });
            mined[h][a] = Some((p, n));
            let hinge = dp - dn + margin;
            if hinge <= 0.0 {
                continue;
            }
            total += hinge / num_heads;
            let up = direction(f.row(a), f.row(p), dp);
            let un = direction(f.row(a), f.row(n), dn);
            let g = &mut grads[h];
            let w = 1.0 / num_heads;
            {
                let mut ga = g.row_mut(a);
                ga += &((&up - &un) * w);
            }
            {
                let mut gp = g.row_mut(p);
                gp -= &(&up * w);
            }
            {
                let mut gn = g.row_mut(n);
                gn += &(&un * w);
            }
        }
    }
    if counted > 0 {
        let scale = 1.0 / counted as f64;
        total *= scale;
        for g in &mut grads {
            *g *= scale;
        }
    }
    BatchTriplet {
        loss: total,
        grads,
        mined,
    }
}
