//! The combined training objective `L_CIL + lambda_pks L_pks + lambda_pr L_pr`
//! and its gradient with respect to every model parameter.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rayon::prelude::*;

use crate::backbone::{ForwardCache, IncrementalModel, ParamGroup, TokenSet};
use crate::data::ClassMap;
use crate::error::{Error, Result};
use crate::pks::{compute_patch_weights, pks_loss_with_grad, PatchWeights, WeightMode};
use crate::pr::{
    cross_entropy, offset_loss, plan_restorations, restore, sample_pairs, RestorationDraw,
};
use crate::prototype::PrototypeStore;

/// Samples per backward work unit. Fixed so that gradient sums do not depend
/// on the thread count.
const BACKWARD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_pks: f64,
    pub lambda_pr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pks: 10.0,
            lambda_pr: 10.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_pks: f64, lambda_pr: f64) -> Result<Self> {
        if !(lambda_pks >= 0.0 && lambda_pr >= 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative, got ({lambda_pks}, {lambda_pr})"
            )));
        }
        Ok(Self {
            lambda_pks,
            lambda_pr,
        })
    }

    /// Weighted sum of the three terms; a non-finite term is reported by name.
    pub fn combine(&self, cil: f64, pks: f64, pr: f64) -> Result<LossBreakdown> {
        for (name, v) in [("cil", cil), ("pks", pks), ("pr", pr)] {
            if !v.is_finite() {
                return Err(Error::NumericalFailure(format!("loss term {name} is {v}")));
            }
        }
        Ok(LossBreakdown {
            total: cil + self.lambda_pks * pks + self.lambda_pr * pr,
            cil,
            pks,
            pr,
        })
    }
}

/// Term values before weighting, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cil: f64,
    pub pks: f64,
    pub pr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub weights: LossWeights,
    pub pks_enabled: bool,
    pub pks_mode: WeightMode,
    pub pks_epsilon: f64,
    pub pr_enabled: bool,
    pub restore_count_per_sample: usize,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            pks_enabled: true,
            pks_mode: WeightMode::InverseDistance,
            pks_epsilon: crate::pks::DEFAULT_EPSILON,
            pr_enabled: true,
            restore_count_per_sample: 1,
        }
    }
}

/// Random choices for one step, drawn once so the objective is a
/// deterministic function of the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepPlan {
    pub pairs: Vec<(usize, usize)>,
    pub restorations: Vec<RestorationDraw>,
}

impl StepPlan {
    pub fn draw<R: Rng + ?Sized>(
        settings: &ObjectiveSettings,
        batch_size: usize,
        has_old_model: bool,
        store: &PrototypeStore,
        rng: &mut R,
    ) -> Result<Self> {
        if !settings.pr_enabled {
            return Ok(Self::default());
        }
        let pairs = if has_old_model {
            sample_pairs(batch_size, rng)?
        } else {
            Vec::new()
        };
        let count = settings.restore_count_per_sample * batch_size;
        let restorations = plan_restorations(batch_size, count, store, rng)?;
        Ok(Self {
            pairs,
            restorations,
        })
    }
}

/// Forward pass of a batch through the live model (and the frozen one).
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub tokens: Vec<TokenSet>,
    caches: Vec<Option<ForwardCache>>,
    pub old_tokens: Option<Vec<TokenSet>>,
}

impl BatchForward {
    pub fn run(
        model: &IncrementalModel,
        old: Option<&IncrementalModel>,
        images: &[Array3<f64>],
        keep_caches: bool,
    ) -> Result<Self> {
        let live: Vec<(TokenSet, Option<ForwardCache>)> = images
            .par_iter()
            .map(|img| {
                if keep_caches {
                    model
                        .backbone
                        .forward_train(img.view())
                        .map(|(t, c)| (t, Some(c)))
                } else {
                    model.backbone.forward(img.view()).map(|t| (t, None))
                }
            })
            .collect::<Result<_>>()?;
        let old_tokens = old
            .map(|m| {
                images
                    .par_iter()
                    .map(|img| m.backbone.forward(img.view()))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let (tokens, caches) = live.into_iter().unzip();
        Ok(Self {
            tokens,
            caches,
            old_tokens,
        })
    }

    pub fn embeddings(&self) -> Vec<Array1<f64>> {
        self.tokens.iter().map(|t| t.cls_token.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// Present when the forward pass kept its caches.
    pub gradient: Option<IncrementalModel>,
    /// Patch weights used by the PKS term, one entry per sample.
    pub patch_weights: Vec<PatchWeights>,
}

/// Everything the objective reads besides the live parameters.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub settings: &'a ObjectiveSettings,
    pub store: &'a PrototypeStore,
    pub classes: &'a ClassMap,
}

impl ObjectiveContext<'_> {
    /// Evaluates the objective on a forward pass. `frozen_weights` replaces the
    /// patch weights computed from the live tokens; weights never carry gradient.
    pub fn evaluate(
        &self,
        model: &IncrementalModel,
        forward: &BatchForward,
        labels: &[usize],
        plan: &StepPlan,
        frozen_weights: Option<&[PatchWeights]>,
    ) -> Result<Evaluation> {
        let n = forward.tokens.len();
        if labels.len() != n {
            return Err(Error::invalid("label count differs from batch size"));
        }
        let settings = self.settings;
        let lambda = settings.weights;
        let dim = model.config().embed_dim;
        let patches = model.config().num_patches();
        let embeddings = forward.embeddings();

        let restored = restore(&plan.restorations, &embeddings, labels, self.store)?;
        let ce = cross_entropy(&embeddings, labels, &restored, &model.head, self.classes)?;

        let mut d_cls: Vec<Array1<f64>> = ce.d_real;
        for (draw, d) in plan.restorations.iter().zip(&ce.d_restored) {
            d_cls[draw.donor] += d;
        }
        let mut d_patch: Vec<Array2<f64>> = vec![Array2::zeros((patches, dim)); n];

        let mut pks = 0.0;
        let mut patch_weights = Vec::new();
        if let (true, Some(old)) = (settings.pks_enabled, forward.old_tokens.as_ref()) {
            patch_weights = match frozen_weights {
                Some(w) => w.to_vec(),
                None => forward
                    .tokens
                    .iter()
                    .map(|t| compute_patch_weights(t, settings.pks_mode, settings.pks_epsilon))
                    .collect::<Result<_>>()?,
            };
            if patch_weights.len() != n {
                return Err(Error::invalid(
                    "one set of patch weights per sample is required",
                ));
            }
            let scale = lambda.lambda_pks / n as f64;
            for i in 0..n {
                let g = pks_loss_with_grad(&forward.tokens[i], &old[i], &patch_weights[i])?;
                pks += g.value;
                d_cls[i].scaled_add(scale, &g.d_cls);
                d_patch[i].scaled_add(scale, &g.d_patch_tokens);
            }
            pks /= n as f64;
        }

        let mut pr = 0.0;
        if let (true, Some(old)) = (
            settings.pr_enabled && !plan.pairs.is_empty(),
            forward.old_tokens.as_ref(),
        ) {
            let old_embeddings: Vec<Array1<f64>> =
                old.iter().map(|t| t.cls_token.clone()).collect();
            let g = offset_loss(
                &plan.pairs,
                &embeddings,
                &old_embeddings,
                labels,
                self.store,
            )?;
            pr = g.value;
            for (d, gi) in d_cls.iter_mut().zip(&g.d_embeddings) {
                d.scaled_add(lambda.lambda_pr, gi);
            }
        }

        let breakdown = lambda.combine(ce.value, pks, pr)?;

        let gradient = if forward.caches.iter().all(Option::is_some) && n > 0 {
            let chunks: Vec<IncrementalModel> = (0..n)
                .collect::<Vec<_>>()
                .par_chunks(BACKWARD_CHUNK)
                .map(|idx| {
                    let mut g = model.zeros_like();
                    for &i in idx {
                        let cache = forward.caches[i].as_ref().expect("checked above");
                        model
                            .backbone
                            .backward(cache, &d_patch[i], &d_cls[i], &mut g.backbone);
                    }
                    g
                })
                .collect();
            let mut total = model.zeros_like();
            for g in &chunks {
                total.add_scaled(g, 1.0);
            }
            total.head = ce.head;
            if !total.all_finite() {
                return Err(Error::NumericalFailure("gradient".into()));
            }
            Some(total)
        } else {
            None
        };

        Ok(Evaluation {
            breakdown,
            gradient,
            patch_weights,
        })
    }

    /// Convenience wrapper: forward without caches and return the loss only.
    pub fn loss(
        &self,
        model: &IncrementalModel,
        old: Option<&IncrementalModel>,
        images: &[Array3<f64>],
        labels: &[usize],
        plan: &StepPlan,
        frozen_weights: Option<&[PatchWeights]>,
    ) -> Result<LossBreakdown> {
        let forward = BatchForward::run(model, old, images, false)?;
        Ok(self
            .evaluate(model, &forward, labels, plan, frozen_weights)?
            .breakdown)
    }
}
