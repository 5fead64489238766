//! Central finite-difference gradient checking against any [`ParamGroup`].

use crate::backbone::ParamGroup;

pub const GRADIENT_FLOOR: f64 = 1e-5;

/// Relative error used by all gradient checks: `|a - n| / max(|a|, |n|, floor)`
/// evaluated on the L2 norms of a whole parameter group. The floor covers
/// groups whose true gradient is identically zero (key biases under softmax
/// shift invariance), where only round-off remains.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(GRADIENT_FLOOR)
}

/// Numerical gradient of `loss` w.r.t. every tensor of `params`, grouped by
/// tensor name. Each entry is perturbed by `+-step` in turn.
pub fn numerical_gradient<P, F>(params: &P, step: f64, mut loss: F) -> Vec<(String, Vec<f64>)>
where
    P: ParamGroup + Clone,
    F: FnMut(&P) -> f64,
{
    let mut work = params.clone();
    let shapes: Vec<(String, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (g, (name, len)) in shapes.into_iter().enumerate() {
        let mut grads = Vec::with_capacity(len);
        for i in 0..len {
            let original = nudge(&mut work, g, i, None);
            nudge(&mut work, g, i, Some(original + step));
            let plus = loss(&work);
            nudge(&mut work, g, i, Some(original - step));
            let minus = loss(&work);
            nudge(&mut work, g, i, Some(original));
            grads.push((plus - minus) / (2.0 * step));
        }
        out.push((name, grads));
    }
    out
}

fn nudge<P: ParamGroup>(params: &mut P, group: usize, index: usize, value: Option<f64>) -> f64 {
    let mut tensors = params.named_tensors_mut();
    let slot = tensors[group]
        .1
        .iter_mut()
        .nth(index)
        .expect("index within tensor");
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}

/// Flattens a gradient buffer into the same `(name, values)` layout as
/// [`numerical_gradient`].
pub fn flatten<P: ParamGroup>(grads: &P) -> Vec<(String, Vec<f64>)> {
    grads
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect()
}

/// Per-group comparison; returns `(name, relative error)` for every group.
pub fn compare<P: ParamGroup>(analytic: &P, numeric: &[(String, Vec<f64>)]) -> Vec<(String, f64)> {
    flatten(analytic)
        .into_iter()
        .zip(numeric)
        .map(|((name, a), (n_name, n))| {
            assert_eq!(&name, n_name, "group order differs");
            let err = relative_error(&a, n);
            (name, err)
        })
        .collect()
}
