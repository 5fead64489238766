//! Named parameter traversal shared by the optimizer, checkpoints and
//! gradient checks.

use ndarray::{ArrayViewD, ArrayViewMutD, Zip};

pub trait ParamGroup {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>);

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>);

    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for (_, mut t) in self.named_tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += scale * other`, tensor by tensor. Both sides must share layout.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.named_tensors();
        let dst = self.named_tensors_mut();
        assert_eq!(src.len(), dst.len(), "parameter layouts differ");
        for ((_, mut d), (_, s)) in dst.into_iter().zip(src) {
            Zip::from(&mut d).and(&s).for_each(|d, &s| *d += scale * s);
        }
    }

    fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
