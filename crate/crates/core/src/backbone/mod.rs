//! Small vision transformer backbone and the growing classifier head.
//!
//! Images are `H x W x C` tensors. They are tiled into non-overlapping
//! `K x K` patches in row-major order, projected to `d` dimensions, given a
//! learned positional embedding, prefixed with a learned [CLS] token and run
//! through pre-norm encoder blocks. Decoder blocks then let the [CLS] token
//! cross-attend over the final patch tokens. The resulting [`TokenSet`] holds
//! the encoder-final patch tokens and the decoder-output [CLS] embedding.

mod attention;
mod blocks;
mod head;
mod layers;
mod params;
mod vit;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::MultiHeadAttention;
pub use blocks::{DecoderBlock, EncoderBlock};
pub use head::{softmax, ClassifierHead};
pub use layers::{gelu, gelu_grad, LayerNorm, Linear, Mlp, LAYER_NORM_EPS};
pub use params::ParamGroup;
pub use vit::{ForwardCache, VisionTransformer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    /// Hidden width of the feed-forward layers as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub num_classes_initial: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 32,
            num_heads: 4,
            num_encoder_blocks: 2,
            num_decoder_blocks: 1,
            mlp_ratio: 4,
            num_classes_initial: 0,
        }
    }
}

impl ModelConfig {
    /// Architecture used for the full-size CIFAR experiments: 5 encoder
    /// blocks, 1 decoder block, 384-dim embeddings, 12 heads.
    pub fn full_scale() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 384,
            num_heads: 12,
            num_encoder_blocks: 5,
            num_decoder_blocks: 1,
            mlp_ratio: 4,
            num_classes_initial: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("in_channels and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Final-layer token embeddings for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    /// `N x d`, one row per patch in row-major patch order.
    pub patch_tokens: Array2<f64>,
    pub cls_token: Array1<f64>,
}

impl TokenSet {
    pub fn num_patches(&self) -> usize {
        self.patch_tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.cls_token.len()
    }
}

/// Tiles an `H x W x C` image into `N` flattened patches. Patches are ordered
/// row-major over the patch grid; within a patch values are ordered by
/// (row, column, channel).
pub fn patchify(image: ArrayView3<'_, f64>, config: &ModelConfig) -> Result<Array2<f64>> {
    let (h, w, c) = image.dim();
    if h != config.image_size || w != config.image_size || c != config.in_channels {
        return Err(Error::invalid(format!(
            "image is {h}x{w}x{c}, model expects {0}x{0}x{1}",
            config.image_size, config.in_channels
        )));
    }
    let k = config.patch_size;
    let side = config.patches_per_side();
    let mut out = Array2::zeros((side * side, config.patch_dim()));
    for pr in 0..side {
        for pc in 0..side {
            let block = image.slice(s![pr * k..(pr + 1) * k, pc * k..(pc + 1) * k, ..]);
            let mut row = out.row_mut(pr * side + pc);
            for (dst, &src) in row.iter_mut().zip(block.iter()) {
                *dst = src;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: ArrayView2<'_, f64>, config: &ModelConfig) -> Result<Array3<f64>> {
    if patches.dim() != (config.num_patches(), config.patch_dim()) {
        return Err(Error::invalid(format!(
            "patch matrix is {:?}, expected ({}, {})",
            patches.dim(),
            config.num_patches(),
            config.patch_dim()
        )));
    }
    let k = config.patch_size;
    let side = config.patches_per_side();
    let mut image = Array3::zeros((config.image_size, config.image_size, config.in_channels));
    for pr in 0..side {
        for pc in 0..side {
            let mut block = image.slice_mut(s![pr * k..(pr + 1) * k, pc * k..(pc + 1) * k, ..]);
            for (dst, &src) in block.iter_mut().zip(patches.row(pr * side + pc).iter()) {
                *dst = src;
            }
        }
    }
    Ok(image)
}

/// Backbone plus classifier: the full trainable state `{theta, phi}`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalModel {
    pub backbone: VisionTransformer,
    pub head: ClassifierHead,
}

impl IncrementalModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let backbone = VisionTransformer::new(config, rng)?;
        let head = ClassifierHead::new(config.embed_dim, config.num_classes_initial);
        Ok(Self { backbone, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn predict(&self, image: ArrayView3<'_, f64>) -> Result<usize> {
        let tokens = self.backbone.forward(image)?;
        self.head.predict(tokens.cls_token.view())
    }
}

impl ParamGroup for IncrementalModel {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.backbone
            .collect(&params::join(prefix, "backbone"), out);
        self.head.collect(&params::join(prefix, "head"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        self.backbone
            .collect_mut(&params::join(prefix, "backbone"), out);
        self.head.collect_mut(&params::join(prefix, "head"), out);
    }
}
