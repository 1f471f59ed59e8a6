//! Per-head additive + classification layers.
//!
//! Head 0 takes the class token, head `k` (1..=K) takes part feature
//! `rho_k`. No parameters are shared between heads. The additive layer is
//! `GELU(BN(x W + b))`; its output `f` is both the retrieval descriptor
//! slice and the input of the bias-free classifier producing `z`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_backward, join, BatchNorm, BatchNormCache, BatchStats, Linear, ParamVisitor,
    Parameterized,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub additive_dim: usize,
    pub num_classes: usize,
    /// Triplet margin.
    pub margin: f64,
    /// Average losses over the global head as well as the K part heads.
    #[serde(default = "default_true")]
    pub include_global_head: bool,
    /// Dropout on the classifier input during training.
    #[serde(default)]
    pub dropout: f64,
}

fn default_true() -> bool {
    true
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            additive_dim: 512,
            num_classes: 701,
            margin: 0.3,
            include_global_head: true,
            dropout: 0.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.additive_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "additive_dim and num_classes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "margin {} must be nonnegative",
                self.margin
            )));
        }
        Ok(())
    }

    /// Rows of [`HeadOutputs`] that enter the losses.
    pub fn loss_heads(&self, num_parts: usize) -> std::ops::Range<usize> {
        if self.include_global_head {
            0..num_parts + 1
        } else {
            1..num_parts + 1
        }
    }
}

/// One sample's head outputs: row 0 is the global head, rows 1..=K parts.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// `(K + 1) x additive_dim`
    pub f: Array2<f64>,
    /// `(K + 1) x C`
    pub z: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Batch statistics, dropout drawn from `seed`.
    Train { seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub additive: Linear,
    pub norm: BatchNorm,
    pub classifier: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Array2<f64>,
    norm: BatchNormCache,
    pre: Array2<f64>,
    mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
    stats: Option<BatchStats>,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &HeadConfig, rng: &mut R) -> Self {
        Self {
            additive: Linear::new(input_dim, cfg.additive_dim, true, rng),
            norm: BatchNorm::new(cfg.additive_dim),
            classifier: Linear::new(cfg.additive_dim, cfg.num_classes, false, rng),
        }
    }

    /// `x` is `B x D`; returns `(f, z, cache)` with `f: B x A`, `z: B x C`.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        mode: HeadMode,
        dropout: f64,
    ) -> (Array2<f64>, Array2<f64>, HeadCache) {
        let h = self.additive.forward(x);
        let (pre, norm, stats) = match mode {
            HeadMode::Train { .. } => {
                let (y, c, s) = self.norm.forward_train(&h);
                (y, c, Some(s))
            }
            HeadMode::Eval => {
                let (y, c) = self.norm.forward_eval(&h);
                (y, c, None)
            }
        };
        let f = pre.mapv(gelu);
        let mask = match mode {
            HeadMode::Train { seed } if dropout > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 - dropout;
                Some(Array2::from_shape_simple_fn(f.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }))
            }
            _ => None,
        };
        let dropped = match &mask {
            Some(m) => &f * m,
            None => f.clone(),
        };
        let z = self.classifier.forward(&dropped);
        (
            f,
            z,
            HeadCache {
                input: x.clone(),
                norm,
                pre,
                mask,
                dropped,
                stats,
            },
        )
    }

    /// Gradients of the loss w.r.t. `f` and `z` back to the head input.
    pub fn backward(
        &mut self,
        cache: &HeadCache,
        df: &Array2<f64>,
        dz: &Array2<f64>,
    ) -> Array2<f64> {
        let mut d_dropped = self.classifier.backward(&cache.dropped, dz);
        if let Some(m) = &cache.mask {
            d_dropped *= m;
        }
        let df_total = d_dropped + df;
        let dpre = gelu_backward(&cache.pre, &df_total);
        // additive output before normalization
        let dh = self.norm.backward(&cache.norm, &dpre);
        self.additive.backward(&cache.input, &dh)
    }

    pub fn commit_stats(&mut self, cache: &HeadCache) {
        if let Some(s) = &cache.stats {
            self.norm.update_running(s);
        }
    }
}

impl Parameterized for Head {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.additive.visit_params(&join(prefix, "add.linear"), f);
        self.norm.visit_params(&join(prefix, "add.norm"), f);
        self.classifier.visit_params(&join(prefix, "cls"), f);
    }
}

/// The `K + 1` heads of one model.
#[derive(Debug, Clone)]
pub struct HeadBank {
    pub config: HeadConfig,
    pub heads: Vec<Head>,
}

/// Outputs for a whole batch, head-major.
#[derive(Debug, Clone)]
pub struct BatchHeadOutputs {
    /// Per head, `B x A`.
    pub f: Vec<Array2<f64>>,
    /// Per head, `B x C`.
    pub z: Vec<Array2<f64>>,
    pub caches: Vec<HeadCache>,
}

impl BatchHeadOutputs {
    pub fn batch_size(&self) -> usize {
        self.f.first().map_or(0, |f| f.nrows())
    }

    /// Regroup into one [`HeadOutputs`] for sample `b`.
    pub fn sample(&self, b: usize) -> HeadOutputs {
        let rows = self.f.len();
        let a = self.f[0].ncols();
        let c = self.z[0].ncols();
        let mut f = Array2::zeros((rows, a));
        let mut z = Array2::zeros((rows, c));
        for h in 0..rows {
            f.row_mut(h).assign(&self.f[h].row(b));
            z.row_mut(h).assign(&self.z[h].row(b));
        }
        HeadOutputs { f, z }
    }
}

impl HeadBank {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        num_parts: usize,
        config: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let heads = (0..=num_parts)
            .map(|_| Head::new(input_dim, &config, rng))
            .collect();
        Ok(Self { config, heads })
    }

    pub fn num_parts(&self) -> usize {
        self.heads.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.heads[0].additive.in_features()
    }

    /// `inputs[h]` is the `B x D` input of head `h`.
    pub fn forward_batch(
        &self,
        inputs: &[Array2<f64>],
        mode: HeadMode,
    ) -> Result<BatchHeadOutputs> {
        if inputs.len() != self.heads.len() {
            return Err(Error::shape("head inputs", self.heads.len(), inputs.len()));
        }
        let mut out = BatchHeadOutputs {
            f: Vec::with_capacity(inputs.len()),
            z: Vec::with_capacity(inputs.len()),
            caches: Vec::with_capacity(inputs.len()),
        };
        for (h, (head, x)) in self.heads.iter().zip(inputs).enumerate() {
            if x.ncols() != self.input_dim() {
                return Err(Error::shape(
                    format!("head {h} input width"),
                    self.input_dim(),
                    x.ncols(),
                ));
            }
            let mode = match mode {
                HeadMode::Train { seed } => HeadMode::Train {
                    seed: seed.wrapping_add(h as u64),
                },
                HeadMode::Eval => HeadMode::Eval,
            };
            let (f, z, cache) = head.forward(x, mode, self.config.dropout);
            out.f.push(f);
            out.z.push(z);
            out.caches.push(cache);
        }
        Ok(out)
    }

    /// Returns per-head input gradients.
    pub fn backward_batch(
        &mut self,
        out: &BatchHeadOutputs,
        df: &[Array2<f64>],
        dz: &[Array2<f64>],
    ) -> Vec<Array2<f64>> {
        self.heads
            .iter_mut()
            .zip(&out.caches)
            .zip(df.iter().zip(dz))
            .map(|((head, cache), (df, dz))| head.backward(cache, df, dz))
            .collect()
    }

    pub fn commit_stats(&mut self, out: &BatchHeadOutputs) {
        for (head, cache) in self.heads.iter_mut().zip(&out.caches) {
            head.commit_stats(cache);
        }
    }
}

impl Parameterized for HeadBank {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, head) in self.heads.iter_mut().enumerate() {
            head.visit_params(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Stack one class token and its part features into per-head inputs for a
/// batch of one.
pub fn single_sample_inputs(class_token: &Array1<f64>, rho: &Array2<f64>) -> Vec<Array2<f64>> {
    std::iter::once(class_token.view())
        .chain(rho.rows())
        .map(|r| r.to_owned().insert_axis(ndarray::Axis(0)))
        .collect()
}

/// Head forward for one image at evaluation time.
pub fn head_forward(
    bank: &HeadBank,
    class_token: &Array1<f64>,
    rho: &Array2<f64>,
) -> Result<HeadOutputs> {
    if rho.nrows() != bank.num_parts() {
        return Err(Error::shape("part count", bank.num_parts(), rho.nrows()));
    }
    Ok(bank
        .forward_batch(&single_sample_inputs(class_token, rho), HeadMode::Eval)?
        .sample(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = HeadConfig {
            additive_dim: 4,
            num_classes: 5,
            ..Default::default()
        };
        let mut bank = HeadBank::new(4, 2, cfg, &mut rng).unwrap();
        for head in &mut bank.heads {
            head.additive = Linear::from_weight(Array2::eye(4), Some(Array2::zeros((1, 4))));
            head.classifier.weight = Param::zeros(4, 5);
        }
        let out = head_forward(&bank, &Array1::ones(4), &Array2::ones((2, 4))).unwrap();
        assert_eq!(out.z, Array2::<f64>::zeros((3, 5)));
    }

    #[test]
    fn output_shapes_at_reference_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = HeadBank::new(384, 2, HeadConfig::default(), &mut rng).unwrap();
        let out = head_forward(&bank, &Array1::zeros(384), &Array2::zeros((2, 384))).unwrap();
        assert_eq!(out.f.dim(), (3, 512));
        assert_eq!(out.z.dim(), (3, 701));
    }

    #[test]
    fn part_count_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = HeadBank::new(8, 2, HeadConfig::default(), &mut rng).unwrap();
        assert!(head_forward(&bank, &Array1::zeros(8), &Array2::zeros((3, 8))).is_err());
    }

    #[test]
    fn perturbing_one_head_leaves_others_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = HeadConfig {
            additive_dim: 6,
            num_classes: 3,
            ..Default::default()
        };
        let mut bank = HeadBank::new(5, 2, cfg, &mut rng).unwrap();
        let inputs: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0)))
            .collect();
        let before = bank
            .forward_batch(&inputs, HeadMode::Train { seed: 1 })
            .unwrap();
        bank.heads[1].additive.weight.value[[0, 0]] += 0.5;
        bank.heads[1].classifier.weight.value[[2, 1]] -= 0.5;
        let after = bank
            .forward_batch(&inputs, HeadMode::Train { seed: 1 })
            .unwrap();
        for h in [0, 2] {
            assert_eq!(before.f[h], after.f[h]);
            assert_eq!(before.z[h], after.z[h]);
        }
        assert_ne!(before.f[1], after.f[1]);
        assert_ne!(before.z[1], after.z[1]);
    }

    #[test]
    fn dropout_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = HeadConfig {
            additive_dim: 32,
            num_classes: 3,
            dropout: 0.5,
            ..Default::default()
        };
        let bank = HeadBank::new(4, 1, cfg, &mut rng).unwrap();
        let x = vec![
            Array2::from_elem((3, 4), 0.3),
            Array2::from_elem((3, 4), -0.2),
        ];
        let eval = bank.forward_batch(&x, HeadMode::Eval).unwrap();
        assert!(eval.caches.iter().all(|c| c.mask.is_none()));
        let train = bank.forward_batch(&x, HeadMode::Train { seed: 9 }).unwrap();
        let mask = train.caches[0].mask.as_ref().unwrap();
        assert!(mask.iter().any(|&m| m == 0.0));
        assert!(mask.iter().any(|&m| m == 2.0));
    }
}
