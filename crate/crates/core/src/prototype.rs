//! Per-class [CLS]-embedding centers: the only per-class state kept once a
//! task is over.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub task_id: usize,
    pub center: Array1<f64>,
    pub sample_count: usize,
    pub finalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    dim: usize,
    prototypes: BTreeMap<usize, ClassPrototype>,
}

impl PrototypeStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            prototypes: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, class_id: usize) -> Option<&ClassPrototype> {
        self.prototypes.get(&class_id)
    }

    pub fn center(&self, class_id: usize) -> Option<&Array1<f64>> {
        self.prototypes.get(&class_id).map(|p| &p.center)
    }

    /// All prototypes in ascending class-id order.
    pub fn iter(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.prototypes.values()
    }

    /// Registers the classes of a new task with empty running means.
    pub fn begin_task(&mut self, task_id: usize, classes: &[usize]) -> Result<()> {
        for &c in classes {
            if let Some(p) = self.prototypes.get(&c) {
                return Err(Error::ProtocolViolation(format!(
                    "class {c} already belongs to task {}",
                    p.task_id
                )));
            }
        }
        for &c in classes {
            self.prototypes.insert(
                c,
                ClassPrototype {
                    class_id: c,
                    task_id,
                    center: Array1::zeros(self.dim),
                    sample_count: 0,
                    finalized: false,
                },
            );
        }
        Ok(())
    }

    /// Folds a batch of embeddings of one class into its running mean.
    pub fn update_center<'a, I>(&mut self, class_id: usize, embeddings: I) -> Result<&Array1<f64>>
    where
        I: IntoIterator<Item = ArrayView1<'a, f64>>,
    {
        let dim = self.dim;
        let proto = self.prototypes.get_mut(&class_id).ok_or_else(|| {
            Error::invalid(format!("class {class_id} is not part of the current task"))
        })?;
        if proto.finalized {
            return Err(Error::ImmutablePrototype {
                class_id,
                task_id: proto.task_id,
            });
        }
        for e in embeddings {
            if e.len() != dim {
                return Err(Error::invalid(format!(
                    "embedding has dimension {}, store expects {dim}",
                    e.len()
                )));
            }
            proto.sample_count += 1;
            let rate = 1.0 / proto.sample_count as f64;
            proto.center.zip_mut_with(&e, |c, &x| *c += (x - *c) * rate);
        }
        Ok(&proto.center)
    }

    /// Restarts the running means of `task_id` without discarding the current
    /// centers: the next update for a class overwrites its center outright.
    pub fn restart_task(&mut self, task_id: usize) -> Result<()> {
        for p in self
            .prototypes
            .values_mut()
            .filter(|p| p.task_id == task_id)
        {
            if p.finalized {
                return Err(Error::ImmutablePrototype {
                    class_id: p.class_id,
                    task_id,
                });
            }
            p.sample_count = 0;
        }
        Ok(())
    }

    /// Freezes every prototype of `task_id`.
    pub fn finalize_task(&mut self, task_id: usize) -> Result<()> {
        let mut any = false;
        for p in self.prototypes.values().filter(|p| p.task_id == task_id) {
            any = true;
            if p.sample_count == 0 {
                return Err(Error::IncompleteTask {
                    task_id,
                    class_id: p.class_id,
                });
            }
        }
        if !any {
            return Err(Error::invalid(format!(
                "task {task_id} has no registered classes"
            )));
        }
        for p in self
            .prototypes
            .values_mut()
            .filter(|p| p.task_id == task_id)
        {
            p.finalized = true;
        }
        Ok(())
    }

    /// Inserts an already finalized prototype, as read from a checkpoint.
    pub fn insert_finalized(
        &mut self,
        class_id: usize,
        task_id: usize,
        center: Array1<f64>,
        sample_count: usize,
    ) -> Result<()> {
        if center.len() != self.dim {
            return Err(Error::invalid(format!(
                "prototype for class {class_id} has dimension {}, store expects {}",
                center.len(),
                self.dim
            )));
        }
        if sample_count == 0 || center.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "prototype for class {class_id} is not a valid center"
            )));
        }
        if self.prototypes.contains_key(&class_id) {
            return Err(Error::ProtocolViolation(format!(
                "duplicate prototype for class {class_id}"
            )));
        }
        self.prototypes.insert(
            class_id,
            ClassPrototype {
                class_id,
                task_id,
                center,
                sample_count,
                finalized: true,
            },
        );
        Ok(())
    }

    pub fn finalized(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.prototypes.values().filter(|p| p.finalized)
    }

    pub fn num_finalized(&self) -> usize {
        self.finalized().count()
    }

    /// Uniform draw over finalized classes, returned as `(task_id, class_id)`.
    pub fn sample_old_class<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, usize)> {
        let n = self.num_finalized();
        if n == 0 {
            return Err(Error::EmptyStore);
        }
        let pick = rng.random_range(0..n);
        let p = self.finalized().nth(pick).expect("index below count");
        Ok((p.task_id, p.class_id))
    }

    /// Number of floating-point values held; grows with classes, never samples.
    pub fn stored_values(&self) -> usize {
        self.prototypes.values().map(|p| p.center.len()).sum()
    }
}
