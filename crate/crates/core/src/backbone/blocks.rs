use ndarray::{concatenate, s, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::attention::{AttentionCache, MultiHeadAttention};
use super::layers::{LayerNorm, LayerNormCache, Mlp, MlpCache};
use super::params::{join, ParamGroup};

/// Pre-norm self-attention block over the full token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    norm1: LayerNormCache,
    attn: AttentionCache,
    norm2: LayerNormCache,
    mlp: MlpCache,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, hidden, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, EncoderCache) {
        let (h1, norm1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&h1, &h1);
        let x1 = x + &a;
        let (h2, norm2) = self.norm2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&h2);
        (
            x1 + &m,
            EncoderCache {
                norm1,
                attn,
                norm2,
                mlp,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &EncoderCache,
        dout: &Array2<f64>,
        grad: &mut EncoderBlock,
    ) -> Array2<f64> {
        let dh2 = self.mlp.backward(&cache.mlp, dout, &mut grad.mlp);
        let dx1 = dout + &self.norm2.backward(&cache.norm2, &dh2, &mut grad.norm2);
        let (dq, dkv) = self.attn.backward(&cache.attn, &dx1, &mut grad.attn);
        let dh1 = dq + &dkv;
        dx1 + &self.norm1.backward(&cache.norm1, &dh1, &mut grad.norm1)
    }
}

impl ParamGroup for EncoderBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.mlp.collect(&join(prefix, "mlp"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        self.norm1.collect_mut(&join(prefix, "norm1"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.norm2.collect_mut(&join(prefix, "norm2"), out);
        self.mlp.collect_mut(&join(prefix, "mlp"), out);
    }
}

/// Pre-norm block in which the [CLS] token alone cross-attends over the patch
/// tokens. Patch tokens pass through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    norm1: LayerNormCache,
    attn: AttentionCache,
    norm2: LayerNormCache,
    mlp: MlpCache,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, hidden, rng),
        }
    }

    /// `cls` is `1 x d`, `patches` is `N x d`; returns the updated `1 x d` cls row.
    pub fn forward(&self, cls: &Array2<f64>, patches: &Array2<f64>) -> (Array2<f64>, DecoderCache) {
        let tokens = concatenate![Axis(0), *cls, *patches];
        let (normed, norm1) = self.norm1.forward(&tokens);
        let query = normed.slice(s![0..1, ..]).to_owned();
        let context = normed.slice(s![1.., ..]).to_owned();
        let (a, attn) = self.attn.forward(&query, &context);
        let c1 = cls + &a;
        let (h2, norm2) = self.norm2.forward(&c1);
        let (m, mlp) = self.mlp.forward(&h2);
        (
            c1 + &m,
            DecoderCache {
                norm1,
                attn,
                norm2,
                mlp,
            },
        )
    }

    /// Returns `(dL/dcls, dL/dpatches)`.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        dout: &Array2<f64>,
        grad: &mut DecoderBlock,
    ) -> (Array2<f64>, Array2<f64>) {
        let dh2 = self.mlp.backward(&cache.mlp, dout, &mut grad.mlp);
        let dc1 = dout + &self.norm2.backward(&cache.norm2, &dh2, &mut grad.norm2);
        let (dquery, dcontext) = self.attn.backward(&cache.attn, &dc1, &mut grad.attn);
        let dnormed = concatenate![Axis(0), dquery, dcontext];
        let dtokens = self.norm1.backward(&cache.norm1, &dnormed, &mut grad.norm1);
        let dcls = dc1 + dtokens.slice(s![0..1, ..]);
        let dpatches = dtokens.slice(s![1.., ..]).to_owned();
        (dcls, dpatches)
    }
}

impl ParamGroup for DecoderBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.mlp.collect(&join(prefix, "mlp"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        self.norm1.collect_mut(&join(prefix, "norm1"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.norm2.collect_mut(&join(prefix, "norm2"), out);
        self.mlp.collect_mut(&join(prefix, "mlp"), out);
    }
}
