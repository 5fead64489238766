//! Sequential task training: snapshot the previous model, grow the
//! classifier, optimize the combined objective, then freeze the new
//! class prototypes.

mod objective;
mod optim;

use std::sync::Arc;

use ndarray::{Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{IncrementalModel, TokenSet};
use crate::config::ExperimentConfig;
use crate::data::{augment, epoch_batches, Batch, ClassMap, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::task_accuracy;
use crate::prototype::PrototypeStore;

pub use objective::{
    BatchForward, Evaluation, LossBreakdown, LossWeights, ObjectiveContext, ObjectiveSettings,
    StepPlan,
};
pub use optim::{cosine_lr, Optimizer};

const STREAM_INIT: u64 = 0;
const STREAM_BATCHES: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_PLAN: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Frozen copy of the model from the end of the previous task.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    model: Arc<IncrementalModel>,
}

impl ModelSnapshot {
    pub fn new(model: &IncrementalModel) -> Self {
        Self {
            model: Arc::new(model.clone()),
        }
    }

    pub fn model(&self) -> &IncrementalModel {
        &self.model
    }

    pub fn tokens(&self, image: ArrayView3<'_, f64>) -> Result<TokenSet> {
        self.model.backbone.forward(image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f64,
    pub loss_total: f64,
    pub loss_cil: f64,
    pub loss_pks: f64,
    pub loss_pr: f64,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cil: f64,
    pub loss_pks: f64,
    pub loss_pr: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TaskReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl ObjectiveSettings {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            weights: LossWeights::new(config.loss.lambda_pks, config.loss.lambda_pr)?,
            pks_enabled: config.pks.enabled,
            pks_mode: config.pks.mode,
            pks_epsilon: config.pks.epsilon,
            pr_enabled: config.pr.enabled,
            restore_count_per_sample: config.pr.restore_count_per_sample,
        })
    }
}

/// Everything that evolves over a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Last task started (0 before the first).
    pub task: usize,
    pub model: IncrementalModel,
    pub snapshot: Option<ModelSnapshot>,
    pub store: PrototypeStore,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub seed: u64,
    classes: Vec<usize>,
    batch_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    plan_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let model = IncrementalModel::new(&config.model, &mut stream(seed, STREAM_INIT))?;
        Ok(Self::from_model(
            config,
            model,
            PrototypeStore::new(config.model.embed_dim),
            0,
            Vec::new(),
        ))
    }

    /// Resumes from a model and store saved at the end of `task`.
    pub fn from_model(
        config: &ExperimentConfig,
        model: IncrementalModel,
        store: PrototypeStore,
        task: usize,
        classes: Vec<usize>,
    ) -> Self {
        let seed = config.seed;
        let optimizer = Optimizer::new(&config.trainer, &model);
        Self {
            task,
            model,
            snapshot: None,
            store,
            optimizer,
            epoch: 0,
            seed,
            classes,
            batch_rng: stream(seed, STREAM_BATCHES),
            augment_rng: stream(seed, STREAM_AUGMENT),
            plan_rng: stream(seed, STREAM_PLAN),
        }
    }

    /// Classes learned so far, in classifier row order.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn class_map(&self) -> ClassMap {
        ClassMap::new(self.classes.iter().copied())
    }

    /// Freezes the current parameters as the previous-task model.
    pub fn snapshot_old_model(&self) -> ModelSnapshot {
        ModelSnapshot::new(&self.model)
    }

    /// Objective value on `batch` with a freshly drawn plan; no update.
    pub fn total_loss<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        settings: &ObjectiveSettings,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let old = self.snapshot.as_ref().map(ModelSnapshot::model);
        let plan = StepPlan::draw(settings, batch.len(), old.is_some(), &self.store, rng)?;
        let classes = self.class_map();
        let ctx = ObjectiveContext {
            settings,
            store: &self.store,
            classes: &classes,
        };
        ctx.loss(&self.model, old, &batch.images, &batch.labels, &plan, None)
    }

    /// Opens task `task`: checks the class protocol, snapshots the previous
    /// model, grows the classifier, registers prototypes and resets the optimizer.
    pub fn begin_task(
        &mut self,
        task: usize,
        classes: &[usize],
        config: &ExperimentConfig,
    ) -> Result<()> {
        if task != self.task + 1 {
            return Err(Error::ProtocolViolation(format!(
                "task {task} cannot follow task {}",
                self.task
            )));
        }
        if classes.is_empty() {
            return Err(Error::ProtocolViolation(format!(
                "task {task} has no classes"
            )));
        }
        if let Some(c) = classes.iter().find(|c| self.classes.contains(c)) {
            return Err(Error::ProtocolViolation(format!(
                "class {c} of task {task} was already learned"
            )));
        }
        self.snapshot = (task > 1).then(|| self.snapshot_old_model());
        let missing =
            (self.classes.len() + classes.len()).saturating_sub(self.model.head.num_classes());
        if missing > 0 {
            self.model.head = self.model.head.grow(missing)?;
        }
        self.store.begin_task(task, classes)?;
        self.classes.extend_from_slice(classes);
        self.optimizer = Optimizer::new(&config.trainer, &self.model);
        self.task = task;
        self.epoch = 0;
        Ok(())
    }

    fn gather(&mut self, data: &Dataset, indices: &[usize], config: &ExperimentConfig) -> Batch {
        let mut batch = Batch::gather(data, indices);
        if config.data.augment {
            let pad = config.data.crop_padding;
            batch.images = batch
                .images
                .iter()
                .map(|img| augment(img.view(), pad, &mut self.augment_rng))
                .collect::<Vec<Array3<f64>>>();
        }
        batch
    }

    /// Runs every epoch of `task` and freezes its prototypes.
    pub fn train_task(
        &mut self,
        spec: &TaskSpec,
        task: usize,
        train: &Dataset,
        test: Option<&Dataset>,
        config: &ExperimentConfig,
    ) -> Result<TaskReport> {
        if task == 0 || task > spec.num_tasks() {
            return Err(Error::invalid(format!(
                "task {task} is outside 1..={}",
                spec.num_tasks()
            )));
        }
        let classes = spec.classes(task).to_vec();
        self.begin_task(task, &classes, config)?;

        let settings = ObjectiveSettings::from_config(config)?;
        let class_map = self.class_map();
        let indices = train.indices_of(&classes);
        if indices.len() < 2 {
            return Err(Error::invalid(format!(
                "task {task} has fewer than two training samples"
            )));
        }
        let tc = &config.trainer;
        let per_epoch = epoch_batches(&indices, tc.batch_size, &mut self.batch_rng.clone()).len();
        let total_steps = per_epoch * tc.epochs;
        let mut report = TaskReport::default();
        let mut step = 0;

        for epoch in 1..=tc.epochs {
            if config.prototype.reset_each_epoch {
                self.store.restart_task(task)?;
            }
            let batches = epoch_batches(&indices, tc.batch_size, &mut self.batch_rng);
            let mut sums = LossBreakdown::default();
            for batch_indices in &batches {
                let batch = self.gather(train, batch_indices, config);
                let old = self.snapshot.clone();
                let old_model = old.as_ref().map(ModelSnapshot::model);
                let forward = BatchForward::run(&self.model, old_model, &batch.images, true)?;

                for &c in &classes {
                    let members = forward
                        .tokens
                        .iter()
                        .zip(&batch.labels)
                        .filter(|(_, &y)| y == c)
                        .map(|(t, _)| t.cls_token.view());
                    self.store.update_center(c, members)?;
                }

                let plan = StepPlan::draw(
                    &settings,
                    batch.len(),
                    old_model.is_some(),
                    &self.store,
                    &mut self.plan_rng,
                )?;
                let ctx = ObjectiveContext {
                    settings: &settings,
                    store: &self.store,
                    classes: &class_map,
                };
                let eval = ctx.evaluate(&self.model, &forward, &batch.labels, &plan, None)?;
                let grad = eval.gradient.expect("caches were kept");
                let lr = cosine_lr(tc.learning_rate, tc.min_learning_rate, step, total_steps);
                self.optimizer.step(&mut self.model, &grad, lr);
                step += 1;

                let b = eval.breakdown;
                sums.total += b.total;
                sums.cil += b.cil;
                sums.pks += b.pks;
                sums.pr += b.pr;
                if tc.log_steps {
                    report.steps.push(StepRecord {
                        task,
                        epoch,
                        step,
                        learning_rate: lr,
                        loss_total: b.total,
                        loss_cil: b.cil,
                        loss_pks: b.pks,
                        loss_pr: b.pr,
                    });
                }
            }
            self.epoch = epoch;
            let count = batches.len() as f64;
            let eval_acc = match (tc.eval_each_epoch, test) {
                (true, Some(test)) => {
                    Some(task_accuracy(&self.model, test, spec, task)?.accuracy())
                }
                _ => None,
            };
            report.epochs.push(EpochRecord {
                task,
                epoch,
                loss_total: sums.total / count,
                loss_cil: sums.cil / count,
                loss_pks: sums.pks / count,
                loss_pr: sums.pr / count,
                eval_acc,
            });
        }

        self.store.finalize_task(task)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests;
