use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};

use super::params::{join, ParamGroup};
use crate::error::{Error, Result};

/// Linear softmax classifier over every class learned so far. Rows follow the
/// order in which classes were first seen.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

impl ClassifierHead {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        Self {
            weight: Array2::zeros((num_classes, dim)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(self.dim(), self.num_classes())
    }

    pub fn logits(&self, embedding: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if embedding.len() != self.dim() {
            return Err(Error::invalid(format!(
                "embedding has dimension {}, classifier expects {}",
                embedding.len(),
                self.dim()
            )));
        }
        Ok(self.weight.dot(&embedding) + &self.bias)
    }

    pub fn classify(&self, embedding: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let logits = self.logits(embedding)?;
        Ok(softmax(logits.view()))
    }

    pub fn predict(&self, embedding: ArrayView1<'_, f64>) -> Result<usize> {
        let logits = self.logits(embedding)?;
        // first maximal index wins ties
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Appends `new_classes` zero-initialized rows; existing rows are copied verbatim.
    pub fn grow(&self, new_classes: usize) -> Result<Self> {
        if new_classes == 0 {
            return Err(Error::invalid("classifier must grow by at least one class"));
        }
        let old = self.num_classes();
        let mut grown = Self::new(self.dim(), old + new_classes);
        grown.weight.slice_mut(s![..old, ..]).assign(&self.weight);
        grown.bias.slice_mut(s![..old]).assign(&self.bias);
        Ok(grown)
    }

    /// Gradient of the loss `dloss_dlogits . logits(embedding)` w.r.t. the
    /// head parameters (accumulated into `grad`) and the embedding (returned).
    pub fn backward(
        &self,
        embedding: ArrayView1<'_, f64>,
        dlogits: ArrayView1<'_, f64>,
        grad: &mut ClassifierHead,
    ) -> Array1<f64> {
        let outer = dlogits
            .insert_axis(Axis(1))
            .dot(&embedding.insert_axis(Axis(0)));
        grad.weight += &outer;
        grad.bias += &dlogits;
        self.weight.t().dot(&dlogits)
    }
}

impl ParamGroup for ClassifierHead {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }

    fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}
