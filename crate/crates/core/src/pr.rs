//! Prototype restoration.
//!
//! Offsets `O = F(x) - mu_{t,y}` of the live model are pulled towards offsets
//! of the frozen previous model (always measured against the current-task
//! centers), so that offsets stay task-agnostic. Old-class embeddings are
//! then synthesized as `mu_old + O` and fed to the classifier together with
//! the real current-task embeddings.

use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbone::{softmax, ClassifierHead, IncrementalModel};
use crate::data::{Batch, ClassMap};
use crate::error::{Error, Result};
use crate::prototype::PrototypeStore;

/// Randomly splits `0..batch_size` into two disjoint halves of size
/// `floor(bs / 2)`. With odd `bs` one index is left out.
pub fn split_batch<R: Rng + ?Sized>(
    batch_size: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if batch_size < 2 {
        return Err(Error::invalid(format!(
            "batch size {batch_size} is too small to split (need at least 2)"
        )));
    }
    let mut idx: Vec<usize> = (0..batch_size).collect();
    idx.shuffle(rng);
    let half = batch_size / 2;
    let s2 = idx[half..2 * half].to_vec();
    idx.truncate(half);
    Ok((idx, s2))
}

/// Pairs `S1` and `S2` positionally after shuffling each independently, giving
/// `floor(bs / 2)` pairs drawn without replacement.
pub fn pair_subsets<R: Rng + ?Sized>(
    mut s1: Vec<usize>,
    mut s2: Vec<usize>,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    s1.shuffle(rng);
    s2.shuffle(rng);
    s1.into_iter().zip(s2).collect()
}

/// Draws the split and the pairing for one batch.
pub fn sample_pairs<R: Rng + ?Sized>(
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let (s1, s2) = split_batch(batch_size, rng)?;
    Ok(pair_subsets(s1, s2, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPair {
    pub current_index: usize,
    pub old_index: usize,
    pub offset_current: Array1<f64>,
    pub offset_old: Array1<f64>,
}

fn class_center(store: &PrototypeStore, class_id: usize) -> Result<&Array1<f64>> {
    store
        .center(class_id)
        .ok_or_else(|| Error::invalid(format!("no class center for class {class_id}")))
}

pub fn offset_pairs(
    pairs: &[(usize, usize)],
    current: &[Array1<f64>],
    old: &[Array1<f64>],
    labels: &[usize],
    store: &PrototypeStore,
) -> Result<Vec<OffsetPair>> {
    pairs
        .iter()
        .map(|&(i, j)| {
            if i >= current.len() || j >= old.len() {
                return Err(Error::invalid(format!("pair ({i}, {j}) outside the batch")));
            }
            Ok(OffsetPair {
                current_index: i,
                old_index: j,
                offset_current: &current[i] - class_center(store, labels[i])?,
                offset_old: &old[j] - class_center(store, labels[j])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OffsetGradient {
    pub value: f64,
    /// `dL/dF(x_i)` for every sample in the batch; rows outside `S1` are zero.
    pub d_embeddings: Vec<Array1<f64>>,
}

/// Mean over pairs of the per-pair mean squared error between the live and
/// previous-model offsets. Old offsets are constants.
pub fn offset_loss(
    pairs: &[(usize, usize)],
    current: &[Array1<f64>],
    old: &[Array1<f64>],
    labels: &[usize],
    store: &PrototypeStore,
) -> Result<OffsetGradient> {
    let dim = store.dim();
    let mut d_embeddings = vec![Array1::zeros(dim); current.len()];
    if pairs.is_empty() {
        return Ok(OffsetGradient {
            value: 0.0,
            d_embeddings,
        });
    }
    let offsets = offset_pairs(pairs, current, old, labels, store)?;
    let sz = offsets.len() as f64;
    let mut value = 0.0;
    for pair in &offsets {
        let diff = &pair.offset_current - &pair.offset_old;
        value += diff.dot(&diff) / dim as f64;
        d_embeddings[pair.current_index].scaled_add(2.0 / (dim as f64 * sz), &diff);
    }
    Ok(OffsetGradient {
        value: value / sz,
        d_embeddings,
    })
}

/// One planned restoration: donor sample index plus the old class drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RestorationDraw {
    pub donor: usize,
    pub old_task: usize,
    pub old_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestoredPrototype {
    pub embedding: Array1<f64>,
    pub label: usize,
    pub old_task: usize,
    pub donor: usize,
}

/// Draws `count` (donor, old class) pairs. Empty when no class is finalized.
pub fn plan_restorations<R: Rng + ?Sized>(
    batch_size: usize,
    count: usize,
    store: &PrototypeStore,
    rng: &mut R,
) -> Result<Vec<RestorationDraw>> {
    if store.num_finalized() == 0 || count == 0 {
        return Ok(Vec::new());
    }
    if batch_size == 0 {
        return Err(Error::invalid(
            "cannot restore prototypes from an empty batch",
        ));
    }
    (0..count)
        .map(|_| {
            let donor = rng.random_range(0..batch_size);
            let (old_task, old_class) = store.sample_old_class(rng)?;
            Ok(RestorationDraw {
                donor,
                old_task,
                old_class,
            })
        })
        .collect()
}

/// `mu_{t_old,k_old} + (F(x) - mu_{t,y})` for each draw.
pub fn restore(
    draws: &[RestorationDraw],
    embeddings: &[Array1<f64>],
    labels: &[usize],
    store: &PrototypeStore,
) -> Result<Vec<RestoredPrototype>> {
    draws
        .iter()
        .map(|d| {
            let donor = embeddings
                .get(d.donor)
                .ok_or_else(|| Error::invalid(format!("donor {} outside the batch", d.donor)))?;
            let offset = donor - class_center(store, labels[d.donor])?;
            Ok(RestoredPrototype {
                embedding: class_center(store, d.old_class)? + &offset,
                label: d.old_class,
                old_task: d.old_task,
                donor: d.donor,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CrossEntropyGradient {
    pub value: f64,
    pub d_real: Vec<Array1<f64>>,
    pub d_restored: Vec<Array1<f64>>,
    pub head: ClassifierHead,
}

/// Cross-entropy averaged over real embeddings and restored prototypes
/// together. `labels` and restored labels are global class ids.
pub fn cross_entropy(
    real: &[Array1<f64>],
    labels: &[usize],
    restored: &[RestoredPrototype],
    head: &ClassifierHead,
    classes: &ClassMap,
) -> Result<CrossEntropyGradient> {
    if real.len() != labels.len() {
        return Err(Error::invalid("embedding and label counts differ"));
    }
    let total = real.len() + restored.len();
    if total == 0 {
        return Err(Error::invalid("cross-entropy over an empty set"));
    }
    let scale = 1.0 / total as f64;
    let mut grad = head.zeros_like();
    let mut value = 0.0;
    let mut term = |z: &Array1<f64>, class_id: usize| -> Result<Array1<f64>> {
        let row = classes
            .row(class_id)
            .filter(|&r| r < head.num_classes())
            .ok_or_else(|| {
                Error::invalid(format!("label {class_id} is outside the classifier range"))
            })?;
        let logits = head.logits(z.view())?;
        let mut p = softmax(logits.view());
        value -= p[row].ln();
        p[row] -= 1.0;
        p *= scale;
        Ok(head.backward(z.view(), p.view(), &mut grad))
    };
    let d_real = real
        .iter()
        .zip(labels)
        .map(|(z, &y)| term(z, y))
        .collect::<Result<Vec<_>>>()?;
    let d_restored = restored
        .iter()
        .map(|r| term(&r.embedding, r.label))
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossEntropyGradient {
        value: value * scale,
        d_real,
        d_restored,
        head: grad,
    })
}

fn embed_batch(model: &IncrementalModel, images: &[Array3<f64>]) -> Result<Vec<Array1<f64>>> {
    images
        .iter()
        .map(|img| model.backbone.forward(img.view()).map(|t| t.cls_token))
        .collect()
}

/// Offset-supervision loss for a batch. `None` when there is no previous
/// model (first task), in which case the term does not apply.
pub fn pr_loss<R: Rng + ?Sized>(
    batch: &Batch,
    current: &IncrementalModel,
    old: Option<&IncrementalModel>,
    store: &PrototypeStore,
    rng: &mut R,
) -> Result<Option<f64>> {
    let Some(old) = old else {
        return Ok(None);
    };
    let pairs = sample_pairs(batch.len(), rng)?;
    let cur = embed_batch(current, &batch.images)?;
    let prev = embed_batch(old, &batch.images)?;
    Ok(Some(
        offset_loss(&pairs, &cur, &prev, &batch.labels, store)?.value,
    ))
}

pub fn restore_prototypes<R: Rng + ?Sized>(
    batch: &Batch,
    current: &IncrementalModel,
    store: &PrototypeStore,
    count: usize,
    rng: &mut R,
) -> Result<Vec<RestoredPrototype>> {
    let draws = plan_restorations(batch.len(), count, store, rng)?;
    if draws.is_empty() {
        return Ok(Vec::new());
    }
    let embeddings = embed_batch(current, &batch.images)?;
    restore(&draws, &embeddings, &batch.labels, store)
}

pub fn cil_loss(
    batch: &Batch,
    restored: &[RestoredPrototype],
    current: &IncrementalModel,
    classes: &ClassMap,
) -> Result<f64> {
    let embeddings = embed_batch(current, &batch.images)?;
    Ok(cross_entropy(&embeddings, &batch.labels, restored, &current.head, classes)?.value)
}
