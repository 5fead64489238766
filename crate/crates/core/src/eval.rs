//! Incremental-learning metrics: per-task accuracy rows, average and last
//! accuracy, and the forgetting measure.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::IncrementalModel;
use crate::data::{Dataset, TaskSpec};
use crate::error::{Error, Result};

/// `a[m][n]`: accuracy on task `n`'s test classes after learning task `m`
/// (both 1-based, `n <= m`). Stored as ragged rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row for the next task; it must have one entry per task so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(Error::invalid(format!(
                "row {expected} needs {expected} entries, got {}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    /// `a_{m,n}` with 1-based indices.
    pub fn get(&self, m: usize, n: usize) -> Option<f64> {
        self.rows
            .get(m.checked_sub(1)?)?
            .get(n.checked_sub(1)?)
            .copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        w.write_record(["row_task", "col_task", "accuracy"])?;
        for (m, row) in self.rows.iter().enumerate() {
            for (n, v) in row.iter().enumerate() {
                w.write_record([(m + 1).to_string(), (n + 1).to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for record in r.deserialize() {
            let (m, n, v): (usize, usize, f64) = record?;
            entries.push((m, n, v));
        }
        let tasks = entries.iter().map(|e| e.0).max().unwrap_or(0);
        let mut rows: Vec<Vec<Option<f64>>> = (1..=tasks).map(|m| vec![None; m]).collect();
        for (m, n, v) in entries {
            if m == 0 || n == 0 || n > m {
                return Err(Error::invalid(format!(
                    "entry ({m}, {n}) is outside the lower triangle"
                )));
            }
            rows[m - 1][n - 1] = Some(v);
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(m, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(n, v)| {
                        v.ok_or_else(|| {
                            Error::invalid(format!("missing entry ({}, {})", m + 1, n + 1))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }
}

/// Result of evaluating one model over every class learned through task `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub task: usize,
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` per learned task, in task order.
    pub per_task_counts: Vec<(usize, usize)>,
}

impl TaskEvaluation {
    /// `Acc_m`: pooled top-1 accuracy over all learned classes.
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    /// Row `a_{m, .}` of the accuracy matrix.
    pub fn row(&self) -> Vec<f64> {
        self.per_task_counts
            .iter()
            .map(|&(c, t)| c as f64 / t as f64)
            .collect()
    }
}

/// Scores predictions for the test samples of tasks `1..=task`. `predict`
/// maps a dataset index to a predicted global class id.
pub fn score_predictions<F>(
    test: &Dataset,
    spec: &TaskSpec,
    task: usize,
    predict: F,
) -> Result<TaskEvaluation>
where
    F: Fn(usize) -> Result<usize> + Sync,
{
    if task == 0 || task > spec.num_tasks() {
        return Err(Error::invalid(format!(
            "task {task} is outside 1..={}",
            spec.num_tasks()
        )));
    }
    let mut per_task_counts = Vec::with_capacity(task);
    for t in 1..=task {
        let indices = test.indices_of(spec.classes(t));
        if indices.is_empty() {
            return Err(Error::invalid(format!("no test samples for task {t}")));
        }
        let hits = indices
            .par_iter()
            .map(|&i| predict(i).map(|p| usize::from(p == test.labels[i])))
            .collect::<Result<Vec<usize>>>()?;
        per_task_counts.push((hits.iter().sum(), indices.len()));
    }
    Ok(TaskEvaluation {
        task,
        correct: per_task_counts.iter().map(|c| c.0).sum(),
        total: per_task_counts.iter().map(|c| c.1).sum(),
        per_task_counts,
    })
}

/// Task-agnostic evaluation: argmax over every learned class's logit.
pub fn task_accuracy(
    model: &IncrementalModel,
    test: &Dataset,
    spec: &TaskSpec,
    task: usize,
) -> Result<TaskEvaluation> {
    let learned = spec.classes_through(task.min(spec.num_tasks())).len();
    if model.head.num_classes() < learned {
        return Err(Error::invalid(format!(
            "model knows {} classes, evaluation through task {task} needs {learned}",
            model.head.num_classes()
        )));
    }
    let classes = spec.class_map();
    score_predictions(test, spec, task, |i| {
        let row = model.predict(test.image(i).view())?;
        classes
            .class_at(row)
            .ok_or_else(|| Error::invalid(format!("classifier row {row} has no class")))
    })
}

pub fn avg_accuracy(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::invalid("average accuracy of an empty sequence"));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// `f_k^i = max_{t < k} (a_{t,i} - a_{k,i})` for `i < k`, and their mean `F_k`.
/// Negative values are kept.
pub fn forgetting(matrix: &AccuracyMatrix, k: usize) -> Result<(Vec<f64>, f64)> {
    if k < 2 {
        return Err(Error::invalid(format!("forgetting needs k >= 2, got {k}")));
    }
    if matrix.num_tasks() < k {
        return Err(Error::invalid(format!(
            "matrix has {} rows, forgetting at k = {k} needs {k}",
            matrix.num_tasks()
        )));
    }
    let rows = matrix.rows();
    let per_task: Vec<f64> = (0..k - 1)
        .map(|i| {
            let last = rows[k - 1][i];
            (i..k - 1)
                .map(|t| rows[t][i] - last)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mean = per_task.iter().sum::<f64>() / (k - 1) as f64;
    Ok((per_task, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `Acc_i` for every task.
    pub accuracies: Vec<f64>,
    pub average_accuracy: f64,
    pub last_accuracy: f64,
    /// `f_T^i` for `i < T`; empty for a single task.
    pub forgetting_per_task: Vec<f64>,
    /// `F_T`, absent for a single task.
    pub average_forgetting: Option<f64>,
}

impl MetricsReport {
    pub fn new(accuracies: Vec<f64>, matrix: &AccuracyMatrix) -> Result<Self> {
        let average_accuracy = avg_accuracy(&accuracies)?;
        let last_accuracy = *accuracies.last().expect("non-empty");
        let t = matrix.num_tasks();
        let (forgetting_per_task, average_forgetting) = if t >= 2 {
            let (f, mean) = forgetting(matrix, t)?;
            (f, Some(mean))
        } else {
            (Vec::new(), None)
        };
        Ok(Self {
            accuracies,
            average_accuracy,
            last_accuracy,
            forgetting_per_task,
            average_forgetting,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        w.write_record(["metric", "task", "value"])?;
        for (i, a) in self.accuracies.iter().enumerate() {
            w.write_record(["acc", &(i + 1).to_string(), &a.to_string()])?;
        }
        w.write_record(["avg_acc", "", &self.average_accuracy.to_string()])?;
        w.write_record(["last_acc", "", &self.last_accuracy.to_string()])?;
        for (i, f) in self.forgetting_per_task.iter().enumerate() {
            w.write_record(["forgetting", &(i + 1).to_string(), &f.to_string()])?;
        }
        if let Some(f) = self.average_forgetting {
            w.write_record(["avg_forgetting", "", &f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10}", "task", "Acc (%)");
        for (i, a) in self.accuracies.iter().enumerate() {
            let _ = writeln!(s, "{:<8} {:>10.2}", i + 1, 100.0 * a);
        }
        let _ = writeln!(
            s,
            "average accuracy   {:>8.2}",
            100.0 * self.average_accuracy
        );
        let _ = writeln!(s, "last accuracy      {:>8.2}", 100.0 * self.last_accuracy);
        if let Some(f) = self.average_forgetting {
            let _ = writeln!(s, "average forgetting {:>8.2}", 100.0 * f);
        }
        s
    }
}
