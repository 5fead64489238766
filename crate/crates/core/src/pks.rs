//! Patch-level knowledge selection: each patch token is distilled towards
//! the previous model's token with a weight derived from its distance to the
//! current [CLS] embedding.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::backbone::TokenSet;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `W_i = 1 / (|P_cls - P_i| + eps)`: patches near [CLS] are held tightest.
    #[default]
    InverseDistance,
    /// Every `W_i = 1`, which is plain per-token distillation.
    Uniform,
    /// `W_i = |P_cls - P_i| + eps`.
    Distance,
}

impl WeightMode {
    pub const ALL: [WeightMode; 3] = [
        WeightMode::InverseDistance,
        WeightMode::Uniform,
        WeightMode::Distance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::InverseDistance => "inverse_distance",
            WeightMode::Uniform => "uniform",
            WeightMode::Distance => "distance",
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown weight mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchWeights {
    pub raw: Array1<f64>,
    /// `raw / max(raw)`; the largest weight is exactly 1.
    pub normalized: Array1<f64>,
    pub mode: WeightMode,
}

fn l2(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// L2 distance of every patch token to the [CLS] token.
pub fn cls_distances(tokens: &TokenSet) -> Array1<f64> {
    tokens
        .patch_tokens
        .rows()
        .into_iter()
        .map(|row| l2((&tokens.cls_token - &row).view()))
        .collect()
}

pub fn compute_patch_weights(
    tokens: &TokenSet,
    mode: WeightMode,
    epsilon: f64,
) -> Result<PatchWeights> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if tokens.num_patches() == 0 {
        return Err(Error::invalid("token set has no patches"));
    }
    let distances = cls_distances(tokens);
    let raw = match mode {
        WeightMode::InverseDistance => distances.mapv(|d| 1.0 / (d + epsilon)),
        WeightMode::Uniform => Array1::ones(distances.len()),
        WeightMode::Distance => distances.mapv(|d| d + epsilon),
    };
    let max = raw.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !max.is_finite() {
        return Err(Error::NumericalFailure("patch weights".into()));
    }
    let normalized = raw.mapv(|w| w / max);
    Ok(PatchWeights {
        raw,
        normalized,
        mode,
    })
}

fn check_shapes(current: &TokenSet, old: &TokenSet, weights: &PatchWeights) -> Result<()> {
    if current.patch_tokens.dim() != old.patch_tokens.dim() || current.dim() != old.dim() {
        return Err(Error::invalid(format!(
            "token sets differ in shape: {:?} vs {:?}",
            current.patch_tokens.dim(),
            old.patch_tokens.dim()
        )));
    }
    if weights.normalized.len() != current.num_patches() {
        return Err(Error::invalid(format!(
            "{} weights for {} patches",
            weights.normalized.len(),
            current.num_patches()
        )));
    }
    Ok(())
}

/// `sum_i w_i |P_t,i - P_t-1,i| + |P_t,cls - P_t-1,cls|`.
pub fn pks_loss(current: &TokenSet, old: &TokenSet, weights: &PatchWeights) -> Result<f64> {
    pks_loss_with_grad(current, old, weights).map(|g| g.value)
}

#[derive(Debug, Clone)]
pub struct PksGradient {
    pub value: f64,
    pub d_patch_tokens: Array2<f64>,
    pub d_cls: Array1<f64>,
}

/// Loss value plus its gradient w.r.t. the current tokens. The weights are
/// constants here: no gradient flows back through the distance-to-[CLS]
/// computation. Where a difference is exactly zero the subgradient 0 is used.
pub fn pks_loss_with_grad(
    current: &TokenSet,
    old: &TokenSet,
    weights: &PatchWeights,
) -> Result<PksGradient> {
    check_shapes(current, old, weights)?;
    let mut value = 0.0;
    let mut d_patch_tokens = &current.patch_tokens - &old.patch_tokens;
    for (mut diff, &w) in d_patch_tokens
        .rows_mut()
        .into_iter()
        .zip(weights.normalized.iter())
    {
        let norm = l2(diff.view());
        value += w * norm;
        if norm > 0.0 {
            diff *= w / norm;
        } else {
            diff.fill(0.0);
        }
    }
    let mut d_cls = &current.cls_token - &old.cls_token;
    let cls_norm = l2(d_cls.view());
    value += cls_norm;
    if cls_norm > 0.0 {
        d_cls /= cls_norm;
    } else {
        d_cls.fill(0.0);
    }
    Ok(PksGradient {
        value,
        d_patch_tokens,
        d_cls,
    })
}
