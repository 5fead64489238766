use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::layers::Linear;
use super::params::{join, ParamGroup};

/// Multi-head scaled dot-product attention. Queries and keys/values may come
/// from different token sets, which gives cross-attention; passing the same
/// matrix twice gives self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub num_heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    mixed: Array2<f64>,
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_heads: usize, rng: &mut R) -> Self {
        Self {
            num_heads,
            query: Linear::xavier(dim, dim, rng),
            key: Linear::xavier(dim, dim, rng),
            value: Linear::xavier(dim, dim, rng),
            output: Linear::xavier(dim, dim, rng),
        }
    }

    fn head_dim(&self) -> usize {
        self.query.w.ncols() / self.num_heads
    }

    pub fn forward(&self, xq: &Array2<f64>, xkv: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(xq);
        let k = self.key.forward(xkv);
        let v = self.value.forward(xkv);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut mixed = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.output.forward(&mixed);
        (
            out,
            AttentionCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                probs,
                mixed,
            },
        )
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        grad: &mut MultiHeadAttention,
    ) -> (Array2<f64>, Array2<f64>) {
        let dmixed = self.output.backward(&cache.mixed, dout, &mut grad.output);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let dmix_h = dmixed.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dmix_h));
            let dp = dmix_h.dot(&cache.v.slice(cols).t());
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dscores = (dp - &row_dot) * p * scale;
            dq.slice_mut(cols)
                .assign(&dscores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols)
                .assign(&dscores.t().dot(&cache.q.slice(cols)));
        }
        let dxq = self.query.backward(&cache.xq, &dq, &mut grad.query);
        let dxkv = self.key.backward(&cache.xkv, &dk, &mut grad.key)
            + self.value.backward(&cache.xkv, &dv, &mut grad.value);
        (dxq, dxkv)
    }
}

impl ParamGroup for MultiHeadAttention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.query.collect(&join(prefix, "query"), out);
        self.key.collect(&join(prefix, "key"), out);
        self.value.collect(&join(prefix, "value"), out);
        self.output.collect(&join(prefix, "output"), out);
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        self.query.collect_mut(&join(prefix, "query"), out);
        self.key.collect_mut(&join(prefix, "key"), out);
        self.value.collect_mut(&join(prefix, "value"), out);
        self.output.collect_mut(&join(prefix, "output"), out);
    }
}
