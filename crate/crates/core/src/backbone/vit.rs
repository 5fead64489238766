use ndarray::{concatenate, s, Array1, Array2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::blocks::{DecoderBlock, DecoderCache, EncoderBlock, EncoderCache};
use super::layers::Linear;
use super::params::{join, ParamGroup};
use super::{patchify, ModelConfig, TokenSet};
use crate::error::{Error, Result};

/// Patch projection, learned positional embedding, pre-norm encoder stack
/// over `[CLS; patches]`, then decoder blocks refining the [CLS] token.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionTransformer {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub pos_embed: Array2<f64>,
    pub cls_token: Array1<f64>,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    patches: Array2<f64>,
    encoder: Vec<EncoderCache>,
    decoder: Vec<DecoderCache>,
}

fn ensure_finite<'a, I>(values: I, layer: impl FnOnce() -> String) -> Result<()>
where
    I: IntoIterator<Item = &'a f64>,
{
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure(layer()))
    }
}

impl VisionTransformer {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let patch_embed = Linear::xavier(config.patch_dim(), d, rng);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let pos_embed =
            Array2::from_shape_simple_fn((config.num_patches(), d), || normal.sample(rng));
        let cls_token = Array1::from_shape_simple_fn(d, || normal.sample(rng));
        let encoder = (0..config.num_encoder_blocks)
            .map(|_| EncoderBlock::new(d, config.num_heads, hidden, rng))
            .collect();
        let decoder = (0..config.num_decoder_blocks)
            .map(|_| DecoderBlock::new(d, config.num_heads, hidden, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed,
            pos_embed,
            cls_token,
            encoder,
            decoder,
        })
    }

    /// Same layout with every tensor set to zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn forward(&self, image: ArrayView3<'_, f64>) -> Result<TokenSet> {
        self.forward_train(image).map(|(tokens, _)| tokens)
    }

    pub fn forward_train(&self, image: ArrayView3<'_, f64>) -> Result<(TokenSet, ForwardCache)> {
        let patches = patchify(image, &self.config)?;
        let embedded = self.patch_embed.forward(&patches) + &self.pos_embed;
        ensure_finite(embedded.iter(), || "patch embedding".to_string())?;
        let cls = self.cls_token.view().insert_axis(Axis(0));
        let mut x = concatenate![Axis(0), cls, embedded];

        let mut encoder = Vec::with_capacity(self.encoder.len());
        for (i, block) in self.encoder.iter().enumerate() {
            let (y, cache) = block.forward(&x);
            ensure_finite(y.iter(), || format!("encoder block {i}"))?;
            encoder.push(cache);
            x = y;
        }

        let patch_tokens = x.slice(s![1.., ..]).to_owned();
        let mut cls = x.slice(s![0..1, ..]).to_owned();
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for (i, block) in self.decoder.iter().enumerate() {
            let (y, cache) = block.forward(&cls, &patch_tokens);
            ensure_finite(y.iter(), || format!("decoder block {i}"))?;
            decoder.push(cache);
            cls = y;
        }

        let tokens = TokenSet {
            patch_tokens,
            cls_token: cls.row(0).to_owned(),
        };
        Ok((
            tokens,
            ForwardCache {
                patches,
                encoder,
                decoder,
            },
        ))
    }

    /// Backpropagates `dL/dpatch_tokens` and `dL/dcls_token`, accumulating into `grad`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_patch_tokens: &Array2<f64>,
        d_cls: &Array1<f64>,
        grad: &mut VisionTransformer,
    ) {
        let mut dcls = d_cls.view().insert_axis(Axis(0)).to_owned();
        let mut dpatches = d_patch_tokens.clone();
        for ((block, block_cache), block_grad) in self
            .decoder
            .iter()
            .zip(&cache.decoder)
            .zip(grad.decoder.iter_mut())
            .rev()
        {
            let (dc, dp) = block.backward(block_cache, &dcls, block_grad);
            dcls = dc;
            dpatches += &dp;
        }

        let mut dx = concatenate![Axis(0), dcls, dpatches];
        for ((block, block_cache), block_grad) in self
            .encoder
            .iter()
            .zip(&cache.encoder)
            .zip(grad.encoder.iter_mut())
            .rev()
        {
            dx = block.backward(block_cache, &dx, block_grad);
        }

        grad.cls_token += &dx.row(0);
        let dembedded = dx.slice(s![1.., ..]).to_owned();
        grad.pos_embed += &dembedded;
        self.patch_embed
            .backward(&cache.patches, &dembedded, &mut grad.patch_embed);
    }
}

impl ParamGroup for VisionTransformer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.patch_embed.collect(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "pos_embed"), self.pos_embed.view().into_dyn()));
        out.push((join(prefix, "cls_token"), self.cls_token.view().into_dyn()));
        for (i, b) in self.encoder.iter().enumerate() {
            b.collect(&join(prefix, &format!("encoder.{i}")), out);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.collect(&join(prefix, &format!("decoder.{i}")), out);
        }
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        self.patch_embed
            .collect_mut(&join(prefix, "patch_embed"), out);
        out.push((
            join(prefix, "pos_embed"),
            self.pos_embed.view_mut().into_dyn(),
        ));
        out.push((
            join(prefix, "cls_token"),
            self.cls_token.view_mut().into_dyn(),
        ));
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("encoder.{i}")), out);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("decoder.{i}")), out);
        }
    }
}
