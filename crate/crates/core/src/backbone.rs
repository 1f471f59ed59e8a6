//! Small Vision Transformer mapping an image to one class token and `N`
//! patch tokens.
//!
//! Blocks are pre-norm: `Z' = MHSA(LN(Z)) + Z`, `Z = MLP(LN(Z')) + Z'`,
//! with a GELU between the two MLP layers. Positional embeddings are
//! learnable and trained from scratch.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_backward, join, trunc_normal, AttentionCache, LayerNorm, LayerNormCache, Linear,
    MultiHeadSelfAttention, Param, ParamVisitor, Parameterized,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// LayerNorm after the last block. Off by default.
    #[serde(default)]
    pub final_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl BackboneConfig {
    /// Desk-scale default: 64x64 input, patch 8, D=64, 4 blocks, 4 heads.
    pub fn micro() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            final_norm: false,
        }
    }

    /// ViT-S at 256x256 input.
    pub fn vit_small() -> Self {
        Self {
            image_height: 256,
            image_width: 256,
            channels: 3,
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            num_heads: 6,
            mlp_ratio: 4.0,
            final_norm: false,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 || self.channels == 0
        {
            return bad("patch_size, embed_dim, num_heads and channels must be positive".into());
        }
        if self.image_height == 0
            || self.image_width == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "image {}x{} is not a positive multiple of patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        Ok(())
    }
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub class_token: ndarray::Array1<f64>,
    /// `N x D`, raster order over the patch grid.
    pub patch_tokens: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl Block {
    fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(d),
            attn: MultiHeadSelfAttention::new(d, cfg.num_heads, rng),
            norm2: LayerNorm::new(d),
            fc1: Linear::new(d, cfg.mlp_hidden(), true, rng),
            fc2: Linear::new(cfg.mlp_hidden(), d, true, rng),
        }
    }

    fn forward(&self, z: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (a, ln1) = self.norm1.forward(z);
        let (attn_out, attn) = self.attn.forward(&a);
        let z_mid = z + &attn_out;
        let (ln2_out, ln2) = self.norm2.forward(&z_mid);
        let hidden_pre = self.fc1.forward(&ln2_out);
        let hidden = hidden_pre.mapv(gelu);
        let out = self.fc2.forward(&hidden) + &z_mid;
        (
            out,
            BlockCache {
                ln1,
                attn,
                ln2,
                ln2_out,
                hidden_pre,
                hidden,
            },
        )
    }

    fn backward(&mut self, cache: &BlockCache, dout: &Array2<f64>) -> Array2<f64> {
        let dhidden = self.fc2.backward(&cache.hidden, dout);
        let dpre = gelu_backward(&cache.hidden_pre, &dhidden);
        let dln2 = self.fc1.backward(&cache.ln2_out, &dpre);
        let dz_mid = self.norm2.backward(&cache.ln2, &dln2) + dout;
        let da = self.attn.backward(&cache.attn, &dz_mid);
        self.norm1.backward(&cache.ln1, &da) + &dz_mid
    }
}

impl Parameterized for Block {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.fc1.visit_params(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_params(&join(prefix, "mlp.fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_embed: Linear,
    pub cls_token: Param,
    pub pos_embed: Param,
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    patches: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    blocks: Vec<BlockCache>,
    final_norm: Option<LayerNormCache>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let n = config.num_patches();
        let patch_embed = Linear::new(config.patch_dim(), d, true, rng);
        let cls_token = Param::new(trunc_normal(1, d, 0.02, rng));
        let pos_embed = Param::new(trunc_normal(n + 1, d, 0.02, rng));
        let blocks = (0..config.depth)
            .map(|_| Block::new(&config, rng))
            .collect();
        let norm = config.final_norm.then(|| LayerNorm::new(d));
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        })
    }

    /// Flatten an `H x W x C` image into `N` patch rows, raster order over
    /// the grid, each row ordered `(dy, dx, c)`.
    pub fn patchify(&self, image: &Image) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let expected = (cfg.image_height, cfg.image_width, cfg.channels);
        if image.dim() != expected {
            return Err(Error::shape(
                "input image (H, W, C)",
                format!("{expected:?}"),
                format!("{:?}", image.dim()),
            ));
        }
        let p = cfg.patch_size;
        let (gh, gw) = cfg.grid();
        let mut out = Array2::zeros((gh * gw, cfg.patch_dim()));
        for gy in 0..gh {
            for gx in 0..gw {
                let block = image.slice(s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p, ..]);
                let mut row = out.row_mut(gy * gw + gx);
                for (dst, &v) in row.iter_mut().zip(block.iter()) {
                    *dst = v;
                }
            }
        }
        Ok(out)
    }

    /// `Z_0 = [x_cls; x_p] + pos`, shape `(N + 1) x D`.
    pub fn embed(&self, image: &Image) -> Result<(Array2<f64>, EmbedCache)> {
        let patches = self.patchify(image)?;
        let xp = self.patch_embed.forward(&patches);
        let z0 = concatenate(Axis(0), &[self.cls_token.value.view(), xp.view()])
            .expect("cls and patch rows share width")
            + &self.pos_embed.value;
        Ok((z0, EmbedCache { patches }))
    }

    pub fn encode(&self, z0: &Array2<f64>) -> Result<(TokenSet, EncodeCache)> {
        let cfg = &self.config;
        let rows = cfg.num_patches() + 1;
        if z0.dim() != (rows, cfg.embed_dim) {
            return Err(Error::shape(
                "encoder input",
                format!("({rows}, {})", cfg.embed_dim),
                format!("{:?}", z0.dim()),
            ));
        }
        let mut z = z0.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            let (next, cache) = block.forward(&z);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    stage: "encoder block",
                    layer,
                });
            }
            z = next;
            blocks.push(cache);
        }
        let final_norm = match &self.norm {
            Some(ln) => {
                let (y, cache) = ln.forward(&z);
                z = y;
                Some(cache)
            }
            None => None,
        };
        let tokens = TokenSet {
            class_token: z.row(0).to_owned(),
            patch_tokens: z.slice(s![1.., ..]).to_owned(),
        };
        Ok((tokens, EncodeCache { blocks, final_norm }))
    }

    pub fn forward(&self, image: &Image) -> Result<(TokenSet, EmbedCache, EncodeCache)> {
        let (z0, embed) = self.embed(image)?;
        let (tokens, encode) = self.encode(&z0)?;
        Ok((tokens, embed, encode))
    }

    /// Backpropagate token gradients to `Z_0`.
    pub fn encode_backward(
        &mut self,
        cache: &EncodeCache,
        d_class: &ndarray::Array1<f64>,
        d_patches: &Array2<f64>,
    ) -> Array2<f64> {
        let mut dz = concatenate(
            Axis(0),
            &[d_class.view().insert_axis(Axis(0)), d_patches.view()],
        )
        .expect("token gradients share width");
        if let (Some(ln), Some(c)) = (&mut self.norm, &cache.final_norm) {
            dz = ln.backward(c, &dz);
        }
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dz = block.backward(c, &dz);
        }
        dz
    }

    pub fn embed_backward(&mut self, cache: &EmbedCache, dz0: &Array2<f64>) {
        self.pos_embed.grad += dz0;
        self.cls_token.grad += &dz0.slice(s![0..1, ..]);
        let dxp = dz0.slice(s![1.., ..]).to_owned();
        self.patch_embed.backward(&cache.patches, &dxp);
    }

    /// True for parameters trained at the backbone learning rate; the
    /// positional embeddings are fresh and train with the new layers.
    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("backbone.") && name != "backbone.pos_embed"
    }
}

impl Parameterized for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.patch_embed
            .visit_params(&join(prefix, "patch_embed.proj"), f);
        f(&join(prefix, "cls_token"), &mut self.cls_token);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(ln) = &mut self.norm {
            ln.visit_params(&join(prefix, "norm"), f);
        }
    }
}
