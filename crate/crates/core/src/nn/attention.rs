use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::linear::Linear;
use super::param::{join, ParamVisitor, Parameterized};

/// Multi-head self-attention with a fused `qkv` projection.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub num_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Array2<f64>,
    qkv: Array2<f64>,
    /// Row-softmaxed scores, one `T x T` matrix per head.
    probs: Vec<Array2<f64>>,
    merged: Array2<f64>,
}

impl MultiHeadSelfAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_heads: usize, rng: &mut R) -> Self {
        assert!(
            dim.is_multiple_of(num_heads),
            "embed dim {dim} not divisible by {num_heads} heads"
        );
        Self {
            qkv: Linear::new(dim, 3 * dim, true, rng),
            proj: Linear::new(dim, dim, true, rng),
            num_heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.proj.in_features() / self.num_heads
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let dim = self.proj.in_features();
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut merged = Array2::zeros((x.nrows(), dim));
        let mut probs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![.., dim + h * hd..dim + (h + 1) * hd]);
            let v = qkv.slice(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
            let mut scores = q.dot(&k.t()) * scale;
            softmax_rows(&mut scores);
            merged
                .slice_mut(s![.., h * hd..(h + 1) * hd])
                .assign(&scores.dot(&v));
            probs.push(scores);
        }
        let y = self.proj.forward(&merged);
        (
            y,
            AttentionCache {
                input: x.clone(),
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Array2<f64>) -> Array2<f64> {
        let dim = self.proj.in_features();
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let dmerged = self.proj.backward(&cache.merged, dy);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let q = cache.qkv.slice(s![.., h * hd..(h + 1) * hd]);
            let k = cache.qkv.slice(s![.., dim + h * hd..dim + (h + 1) * hd]);
            let v = cache
                .qkv
                .slice(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
            let dout = dmerged.slice(s![.., h * hd..(h + 1) * hd]);
            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            // softmax backward: dS = P * (dP - rowsum(dP * P))
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &row_dot) * p * scale;
            dqkv.slice_mut(s![.., h * hd..(h + 1) * hd])
                .assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., dim + h * hd..dim + (h + 1) * hd])
                .assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd])
                .assign(&dv);
        }
        self.qkv.backward(&cache.input, &dqkv)
    }
}

impl Parameterized for MultiHeadSelfAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}
