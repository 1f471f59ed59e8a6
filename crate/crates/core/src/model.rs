//! The full two-branch model: one shared backbone for both views, the
//! part aggregation step and the per-head classification module.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::asa::{asa_backward, asa_forward, PartFeatures, PartitionSpec};
use crate::backbone::{Backbone, BackboneConfig, EmbedCache, EncodeCache, TokenSet};
use crate::checkpoint::{Checkpoint, Tensor};
use crate::data::{Image, Normalization};
use crate::error::{Error, Result};
use crate::heads::{BatchHeadOutputs, HeadBank, HeadConfig, HeadMode, HeadOutputs};
use crate::losses::{batch_triplet, ce_loss_with_grad, SampleTag};
use crate::nn::{ParamVisitor, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub partition: PartitionSpec,
    pub head: HeadConfig,
    #[serde(default)]
    pub normalization: Normalization,
    /// L2-normalize descriptors before ranking.
    #[serde(default)]
    pub l2_normalize_descriptors: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::micro(),
            partition: PartitionSpec::default(),
            head: HeadConfig {
                additive_dim: 512,
                num_classes: 8,
                ..HeadConfig::default()
            },
            normalization: Normalization::default(),
            l2_normalize_descriptors: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.partition.validate()?;
        self.head.validate()?;
        let n = self.backbone.num_patches();
        if self.partition.num_parts > n {
            return Err(Error::Config(format!(
                "num_parts {} exceeds the {n} patches of the backbone grid",
                self.partition.num_parts
            )));
        }
        Ok(())
    }

    pub fn descriptor_len(&self) -> usize {
        (self.partition.num_parts + 1) * self.head.additive_dim
    }
}

#[derive(Debug, Clone)]
pub struct GeoModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub heads: HeadBank,
}

/// Forward state of one image up to (not including) the heads.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub tokens: TokenSet,
    pub parts: PartFeatures,
    embed: EmbedCache,
    encode: EncodeCache,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub samples: Vec<SampleForward>,
    pub heads: BatchHeadOutputs,
}

/// Per-head gradient matrices, one `B x _` matrix per head.
pub type HeadGrads = Vec<Array2<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub triplet: f64,
    pub total: f64,
}

impl GeoModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.backbone.clone(), &mut rng)?;
        let heads = HeadBank::new(
            config.backbone.embed_dim,
            config.partition.num_parts,
            config.head.clone(),
            &mut rng,
        )?;
        Ok(Self {
            config,
            backbone,
            heads,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.config.partition.num_parts
    }

    pub fn forward_sample(&self, image: &Image) -> Result<SampleForward> {
        let (tokens, embed, encode) = self.backbone.forward(image)?;
        let parts = asa_forward(tokens.patch_tokens.view(), &self.config.partition)?;
        Ok(SampleForward {
            tokens,
            parts,
            embed,
            encode,
        })
    }

    fn head_inputs(&self, samples: &[SampleForward]) -> Vec<Array2<f64>> {
        let d = self.config.backbone.embed_dim;
        let b = samples.len();
        let mut inputs = vec![Array2::zeros((b, d)); self.num_parts() + 1];
        for (i, s) in samples.iter().enumerate() {
            inputs[0].row_mut(i).assign(&s.tokens.class_token);
            for (k, row) in s.parts.rho.rows().into_iter().enumerate() {
                inputs[k + 1].row_mut(i).assign(&row);
            }
        }
        inputs
    }

    /// Both views go through the same backbone instance; samples are
    /// independent up to the heads and run in parallel.
    pub fn forward_batch(&self, images: &[Image], mode: HeadMode) -> Result<BatchForward> {
        let samples = images
            .par_iter()
            .map(|img| self.forward_sample(img))
            .collect::<Result<Vec<_>>>()?;
        let heads = self
            .heads
            .forward_batch(&self.head_inputs(&samples), mode)?;
        Ok(BatchForward { samples, heads })
    }

    /// Losses of a batch plus the gradients w.r.t. head features and
    /// logits (per head, `B x A` and `B x C`).
    pub fn losses(
        &self,
        fwd: &BatchForward,
        labels: &[usize],
        tags: &[SampleTag],
    ) -> Result<(LossBreakdown, HeadGrads, HeadGrads)> {
        let b = labels.len();
        let heads = self.config.head.loss_heads(self.num_parts());
        let mut dz: Vec<Array2<f64>> = fwd
            .heads
            .z
            .iter()
            .map(|z| Array2::zeros(z.raw_dim()))
            .collect();
        let mut ce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let out = fwd.heads.sample(i);
            let rows = out.z.slice(ndarray::s![heads.clone(), ..]);
            let (l, g) = ce_loss_with_grad(rows, y)?;
            ce += l / b as f64;
            for (gi, h) in heads.clone().enumerate() {
                let mut row = dz[h].row_mut(i);
                row += &(&g.row(gi) / b as f64);
            }
        }
        let trip = batch_triplet(&fwd.heads.f, tags, heads, self.config.head.margin);
        let breakdown = LossBreakdown {
            ce,
            triplet: trip.loss,
            total: crate::losses::total_loss(ce, trip.loss),
        };
        Ok((breakdown, trip.grads, dz))
    }

    /// Accumulate parameter gradients for a batch given head-level
    /// gradients.
    pub fn backward(&mut self, fwd: &BatchForward, df: &[Array2<f64>], dz: &[Array2<f64>]) {
        let d_inputs = self.heads.backward_batch(&fwd.heads, df, dz);
        let spec = self.config.partition.clone();
        for (i, s) in fwd.samples.iter().enumerate() {
            let d_class: Array1<f64> = d_inputs[0].row(i).to_owned();
            let mut d_rho = Array2::zeros(s.parts.rho.raw_dim());
            for k in 0..self.num_parts() {
                d_rho.row_mut(k).assign(&d_inputs[k + 1].row(i));
            }
            let d_patches = asa_backward(s.tokens.patch_tokens.view(), &s.parts, &spec, &d_rho);
            let dz0 = self
                .backbone
                .encode_backward(&s.encode, &d_class, &d_patches);
            self.backbone.embed_backward(&s.embed, &dz0);
        }
    }

    /// Head outputs for one image at evaluation time.
    pub fn infer(&self, image: &Image) -> Result<(SampleForward, HeadOutputs)> {
        let fwd = self.forward_batch(std::slice::from_ref(image), HeadMode::Eval)?;
        let out = fwd.heads.sample(0);
        let sample = fwd.samples.into_iter().next().expect("one sample");
        Ok((sample, out))
    }

    /// `[f_0; f_1; ...; f_K]`, optionally L2-normalized.
    pub fn extract_descriptor(&self, image: &Image) -> Result<Array1<f64>> {
        let (_, out) = self.infer(image)?;
        let mut v = out
            .f
            .into_shape_with_order(self.config.descriptor_len())
            .expect("contiguous");
        if self.config.l2_normalize_descriptors {
            let norm = v.dot(&v).sqrt();
            if norm > 0.0 {
                v /= norm;
            }
        }
        Ok(v)
    }

    pub fn buffers(&self) -> Vec<(String, Array1<f64>)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.heads.iter().enumerate() {
            out.push((
                format!("heads.{i}.add.norm.running_mean"),
                h.norm.running_mean.clone(),
            ));
            out.push((
                format!("heads.{i}.add.norm.running_var"),
                h.norm.running_var.clone(),
            ));
        }
        out
    }

    pub fn to_checkpoint(&mut self, extra: Value) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "format": "asa-geo",
            "model_config": self.config,
            "extra": extra,
        }));
        self.visit_params("", &mut |name, p| {
            ck.insert(name, Tensor::from_array2(&p.value))
        });
        for (name, buf) in self.buffers() {
            ck.insert(name, Tensor::from_array1(&buf));
        }
        ck
    }

    /// Rebuild a model from an archive written by [`GeoModel::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ck.metadata
                .get("model_config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("metadata lacks model_config".into()))?,
        )?;
        let mut model = GeoModel::new(config, 0)?;
        model.load_tensors(ck, "")?;
        Ok(model)
    }

    /// Overwrite parameters and buffers from `ck`, names prefixed by
    /// `prefix`. Every parameter must be present with a matching shape.
    pub fn load_tensors(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let mut failure = None;
        self.visit_params("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            let key = format!("{prefix}{name}");
            match ck.get(&key).and_then(Tensor::to_array2) {
                Ok(a) if a.dim() == p.value.dim() => p.value = a,
                Ok(a) => {
                    failure = Some(Error::shape(
                        format!("tensor `{key}`"),
                        format!("{:?}", p.value.dim()),
                        format!("{:?}", a.dim()),
                    ))
                }
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        for (i, h) in self.heads.heads.iter_mut().enumerate() {
            let mean = ck
                .get(&format!("{prefix}heads.{i}.add.norm.running_mean"))?
                .to_array1()?;
            let var = ck
                .get(&format!("{prefix}heads.{i}.add.norm.running_var"))?
                .to_array1()?;
            if mean.len() != h.norm.running_mean.len() || var.len() != h.norm.running_var.len() {
                return Err(Error::shape(
                    format!("head {i} running statistics"),
                    h.norm.running_mean.len(),
                    mean.len(),
                ));
            }
            h.norm.running_mean = mean;
            h.norm.running_var = var;
        }
        Ok(())
    }
}

impl Backbone {
    /// Import backbone weights from an external archive whose tensors use
    /// the same naming scheme (`patch_embed.proj.weight`, `cls_token`,
    /// `pos_embed`, `blocks.{i}.norm1.weight`, `blocks.{i}.attn.qkv.weight`,
    /// `blocks.{i}.mlp.fc1.weight`, ...) under `prefix`. Linear weights are
    /// `(in, out)`. Returns the number of tensors imported; positional
    /// embeddings are skipped when `skip_pos_embed` is set.
    pub fn import_weights(
        &mut self,
        ck: &Checkpoint,
        prefix: &str,
        skip_pos_embed: bool,
    ) -> Result<usize> {
        let mut imported = 0;
        let mut failure = None;
        self.visit_params("", &mut |name, p| {
            if failure.is_some() || (skip_pos_embed && name == "pos_embed") {
                return;
            }
            let key = format!("{prefix}{name}");
            let Some(t) = ck.tensors.get(&key) else {
                return;
            };
            match t.to_array2() {
                Ok(a) if a.dim() == p.value.dim() => {
                    p.value = a;
                    imported += 1;
                }
                Ok(a) => {
                    failure = Some(Error::shape(
                        format!("imported `{key}`"),
                        format!("{:?}", p.value.dim()),
                        format!("{:?}", a.dim()),
                    ))
                }
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(imported),
        }
    }
}

impl Parameterized for GeoModel {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.backbone
            .visit_params(&crate::nn::join(prefix, "backbone"), f);
        self.heads
            .visit_params(&crate::nn::join(prefix, "heads"), f);
    }
}

/// Find the first differing field between two JSON values, as a dotted
/// path.
pub fn first_difference(a: &Value, b: &Value, path: &str) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                first_difference(
                    x.get(k).unwrap_or(&Value::Null),
                    y.get(k).unwrap_or(&Value::Null),
                    &p,
                )
            })
        }
        _ if a == b => None,
        _ => Some((path.to_string(), a.to_string(), b.to_string())),
    }
}

/// Fail with the first mismatched architecture field between a
/// checkpoint's config and the expected one. Normalization constants are
/// data-derived and not compared.
pub fn check_compatible(checkpoint: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let strip = |c: &ModelConfig| {
        let mut v = serde_json::to_value(c).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("normalization");
        }
        v
    };
    match first_difference(&strip(checkpoint), &strip(expected), "") {
        None => Ok(()),
        Some((field, checkpoint, config)) => Err(Error::CheckpointMismatch {
            field,
            checkpoint,
            config,
        }),
    }
}

pub fn batch_axis_stack(rows: &[Array1<f64>]) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("rows share length")
}
