use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class-to-task assignment for an `F + C x T` protocol. Task ids are 1-based;
/// `tasks[0]` is the base task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub base_classes: usize,
    pub classes_per_task: usize,
    pub num_incremental_tasks: usize,
    pub seed: u64,
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSpec {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of task `task` (1-based).
    pub fn classes(&self, task: usize) -> &[usize] {
        &self.tasks[task - 1]
    }

    pub fn task_of(&self, class_id: usize) -> Option<usize> {
        self.tasks
            .iter()
            .position(|t| t.contains(&class_id))
            .map(|i| i + 1)
    }

    /// Every class learned up to and including `task`.
    pub fn classes_through(&self, task: usize) -> Vec<usize> {
        self.tasks[..task].iter().flatten().copied().collect()
    }

    pub fn class_map(&self) -> ClassMap {
        ClassMap::new(self.tasks.iter().flatten().copied())
    }

    /// Pairwise disjointness and single occurrence of every class.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (t, classes) in self.tasks.iter().enumerate() {
            if classes.is_empty() {
                return Err(Error::invalid(format!("task {} has no classes", t + 1)));
            }
            for &c in classes {
                if !seen.insert(c) {
                    return Err(Error::ProtocolViolation(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Permutes the distinct labels with `seed`, takes the first `base_classes`
/// as task 1 and consecutive chunks of `classes_per_task` for the rest.
pub fn build_split(
    labels: &[usize],
    base_classes: usize,
    classes_per_task: usize,
    num_incremental_tasks: usize,
    seed: u64,
) -> Result<TaskSpec> {
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    let needed = base_classes + classes_per_task * num_incremental_tasks;
    if base_classes == 0 {
        return Err(Error::invalid("base task needs at least one class"));
    }
    if num_incremental_tasks > 0 && classes_per_task == 0 {
        return Err(Error::invalid(
            "incremental tasks need at least one class each",
        ));
    }
    if needed > distinct.len() {
        return Err(Error::invalid(format!(
            "{base_classes} + {classes_per_task} x {num_incremental_tasks} = {needed} classes requested, dataset has {}",
            distinct.len()
        )));
    }
    let mut order: Vec<usize> = distinct.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tasks = vec![order[..base_classes].to_vec()];
    for t in 0..num_incremental_tasks {
        let start = base_classes + t * classes_per_task;
        tasks.push(order[start..start + classes_per_task].to_vec());
    }
    let spec = TaskSpec {
        base_classes,
        classes_per_task,
        num_incremental_tasks,
        seed,
        tasks,
    };
    spec.validate()?;
    Ok(spec)
}

/// Global class id to classifier row, in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassMap {
    order: Vec<usize>,
    rows: HashMap<usize, usize>,
}

impl ClassMap {
    pub fn new(classes: impl IntoIterator<Item = usize>) -> Self {
        let mut map = Self::default();
        for c in classes {
            if !map.rows.contains_key(&c) {
                map.rows.insert(c, map.order.len());
                map.order.push(c);
            }
        }
        map
    }

    pub fn row(&self, class_id: usize) -> Option<usize> {
        self.rows.get(&class_id).copied()
    }

    pub fn class_at(&self, row: usize) -> Option<usize> {
        self.order.get(row).copied()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_50_plus_5_by_10() {
        let labels: Vec<usize> = (0..100)
            .flat_map(|c| std::iter::repeat_n(c, 3))
            .collect();
        let spec = build_split(&labels, 50, 5, 10, 1993).unwrap();
        let sizes: Vec<usize> = spec.tasks.iter().map(Vec::len).collect();
        assert_eq!(sizes[0], 50);
        assert!(sizes[1..].iter().all(|&s| s == 5));
        assert_eq!(spec.num_tasks(), 11);
        let all: BTreeSet<usize> = spec.tasks.iter().flatten().copied().collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn joint_training_degenerate_case() {
        let labels: Vec<usize> = (0..10).collect();
        let spec = build_split(&labels, 10, 0, 0, 7).unwrap();
        assert_eq!(spec.num_tasks(), 1);
        assert_eq!(spec.tasks[0].len(), 10);
    }

    #[test]
    fn same_seed_same_split() {
        let labels: Vec<usize> = (0..20).collect();
        assert_eq!(
            build_split(&labels, 8, 4, 3, 5).unwrap(),
            build_split(&labels, 8, 4, 3, 5).unwrap()
        );
        assert_ne!(
            build_split(&labels, 8, 4, 3, 5).unwrap(),
            build_split(&labels, 8, 4, 3, 6).unwrap()
        );
    }

    #[test]
    fn insufficient_classes_rejected() {
        let labels: Vec<usize> = (0..10).collect();
        assert!(matches!(
            build_split(&labels, 6, 3, 2, 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn overlapping_tasks_fail_validation() {
        let spec = TaskSpec {
            base_classes: 2,
            classes_per_task: 2,
            num_incremental_tasks: 1,
            seed: 0,
            tasks: vec![vec![0, 1], vec![1, 2]],
        };
        assert!(matches!(spec.validate(), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn class_map_follows_task_order() {
        let labels: Vec<usize> = (0..10).collect();
        let spec = build_split(&labels, 4, 3, 2, 11).unwrap();
        let map = spec.class_map();
        for (row, c) in spec.tasks.iter().flatten().enumerate() {
            assert_eq!(map.row(*c), Some(row));
            assert_eq!(map.class_at(row), Some(*c));
        }
        assert_eq!(spec.task_of(spec.tasks[2][0]), Some(3));
    }
}
