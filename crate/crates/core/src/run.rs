//! Whole-run orchestration behind the command-line tool: training every
//! task, re-evaluating checkpoints, exporting patch weights and ablations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic};
use crate::config::ExperimentConfig;
use crate::data::{build_split, load_dataset, DataSplit, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{task_accuracy, AccuracyMatrix, MetricsReport};
use crate::pks::{compute_patch_weights, WeightMode};
use crate::trainer::{EpochRecord, StepRecord, TrainState};

pub const RUN_MANIFEST: &str = "manifest.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const MATRIX_CSV: &str = "accuracy_matrix.csv";
pub const STEPS_CSV: &str = "steps.csv";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub task_spec: TaskSpec,
    pub dataset_fingerprint: String,
    /// Relative to the run directory, one per completed task.
    pub checkpoints: Vec<String>,
    pub metrics: String,
    pub accuracy_matrix: String,
    pub steps: Option<String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        write_atomic(
            &run_dir.join(RUN_MANIFEST),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )
    }
}

/// Loads the configured dataset and derives the task split.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(DataSplit, TaskSpec)> {
    let split = load_dataset(
        &config.data,
        config.model.image_size,
        config.model.in_channels,
    )?;
    let d = &config.data;
    let spec = build_split(
        &split.train.labels,
        d.base_classes,
        d.classes_per_task,
        d.num_incremental_tasks,
        d.class_order_seed,
    )?;
    Ok((split, spec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub matrix: AccuracyMatrix,
    pub report: MetricsReport,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

fn write_metrics(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "task",
        "epoch",
        "loss_total",
        "loss_cil",
        "loss_pks",
        "loss_pr",
        "eval_acc",
    ])?;
    for r in rows {
        w.write_record([
            r.task.to_string(),
            r.epoch.to_string(),
            r.loss_total.to_string(),
            r.loss_cil.to_string(),
            r.loss_pks.to_string(),
            r.loss_pr.to_string(),
            r.eval_acc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_steps(path: &Path, rows: &[StepRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "task",
        "epoch",
        "step",
        "learning_rate",
        "loss_total",
        "loss_cil",
        "loss_pks",
        "loss_pr",
    ])?;
    for r in rows {
        w.write_record([
            r.task.to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.learning_rate.to_string(),
            r.loss_total.to_string(),
            r.loss_cil.to_string(),
            r.loss_pks.to_string(),
            r.loss_pr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains every task into `run_dir`, writing the manifest first and
/// refreshing it at each task boundary.
pub fn train_run(config: &ExperimentConfig, run_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(run_dir)?;
    let (data, spec) = prepare_data(config)?;
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        config_hash: config.hash(),
        seed: config.seed,
        task_spec: spec.clone(),
        dataset_fingerprint: data.fingerprint(),
        checkpoints: Vec::new(),
        metrics: METRICS_CSV.into(),
        accuracy_matrix: MATRIX_CSV.into(),
        steps: config.trainer.log_steps.then(|| STEPS_CSV.to_string()),
    };
    manifest.write(run_dir)?;

    let mut state = TrainState::new(config)?;
    let mut matrix = AccuracyMatrix::new();
    let mut accuracies = Vec::new();
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    for task in 1..=spec.num_tasks() {
        let report = state.train_task(&spec, task, &data.train, Some(&data.test), config)?;
        epochs.extend(report.epochs);
        steps.extend(report.steps);

        let dir = checkpoint::task_dir(run_dir, task);
        checkpoint::save(
            &dir,
            task,
            &state.model,
            &state.store,
            state.classes(),
            config,
        )?;
        let eval = task_accuracy(&state.model, &data.test, &spec, task)?;
        matrix.push_row(eval.row())?;
        accuracies.push(eval.accuracy());

        write_metrics(&run_dir.join(METRICS_CSV), &epochs)?;
        if config.trainer.log_steps {
            write_steps(&run_dir.join(STEPS_CSV), &steps)?;
        }
        manifest
            .checkpoints
            .push(format!("checkpoints/task_{task}"));
        manifest.write(run_dir)?;
    }
    matrix.write_csv(&run_dir.join(MATRIX_CSV))?;
    let report = MetricsReport::new(accuracies, &matrix)?;
    report.write_csv(&run_dir.join(REPORT_CSV))?;
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        matrix,
        report,
    })
}

/// Rebuilds the accuracy matrix and report from a run's checkpoints.
pub fn eval_run(run_dir: &Path) -> Result<RunSummary> {
    let manifest = RunManifest::load(run_dir)?;
    let (data, spec) = prepare_data(&manifest.config)?;
    if spec != manifest.task_spec {
        return Err(Error::ProtocolViolation(
            "dataset no longer reproduces the recorded task split".into(),
        ));
    }
    let mut matrix = AccuracyMatrix::new();
    let mut accuracies = Vec::new();
    for task in 1..=spec.num_tasks() {
        let dir = checkpoint::task_dir(run_dir, task);
        if !dir.join(checkpoint::MANIFEST_FILE).exists() {
            return Err(Error::MissingCheckpoint { task, path: dir });
        }
        let ckpt = checkpoint::load(&dir)?;
        let eval = task_accuracy(&ckpt.model, &data.test, &spec, task)?;
        matrix.push_row(eval.row())?;
        accuracies.push(eval.accuracy());
    }
    matrix.write_csv(&run_dir.join(MATRIX_CSV))?;
    let report = MetricsReport::new(accuracies, &matrix)?;
    report.write_csv(&run_dir.join(REPORT_CSV))?;
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        matrix,
        report,
    })
}

/// Normalized patch weights of test image `image_id` under the task-`task`
/// checkpoint, in patch order (row-major over the patch grid).
pub fn patch_weights(run_dir: &Path, task: usize, image_id: usize) -> Result<Vec<f64>> {
    let manifest = RunManifest::load(run_dir)?;
    let dir = checkpoint::task_dir(run_dir, task);
    if !dir.join(checkpoint::MANIFEST_FILE).exists() {
        return Err(Error::MissingCheckpoint { task, path: dir });
    }
    let ckpt = checkpoint::load(&dir)?;
    let (data, _) = prepare_data(&manifest.config)?;
    if image_id >= data.test.len() {
        return Err(Error::UnknownImage(image_id));
    }
    let tokens = ckpt
        .model
        .backbone
        .forward(data.test.image(image_id).view())?;
    let pks = &manifest.config.pks;
    Ok(compute_patch_weights(&tokens, pks.mode, pks.epsilon)?
        .normalized
        .to_vec())
}

/// Writes weights as `row,col,weight`, one line per patch.
pub fn write_patch_weights(path: &Path, weights: &[f64], patches_per_side: usize) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["row", "col", "weight"])?;
    for (i, v) in weights.iter().enumerate() {
        w.write_record([
            (i / patches_per_side).to_string(),
            (i % patches_per_side).to_string(),
            v.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    PksOnOff,
    PrOnOff,
    WeightMode,
    /// Baseline, PKS only, PR only, both.
    Components,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pks_on_off" => Ok(Self::PksOnOff),
            "pr_on_off" => Ok(Self::PrOnOff),
            "weight_mode" => Ok(Self::WeightMode),
            "components" => Ok(Self::Components),
            other => Err(Error::UnknownAxis(other.to_string())),
        }
    }
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PksOnOff => "pks_on_off",
            Self::PrOnOff => "pr_on_off",
            Self::WeightMode => "weight_mode",
            Self::Components => "components",
        }
    }

    /// Named configuration variants, in report order.
    pub fn variants(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |pks: bool, pr: bool| {
            let mut c = base.clone();
            c.pks.enabled = pks;
            c.pr.enabled = pr;
            c
        };
        match self {
            Self::PksOnOff => vec![
                ("pks_off".into(), with(false, base.pr.enabled)),
                ("pks_on".into(), with(true, base.pr.enabled)),
            ],
            Self::PrOnOff => vec![
                ("pr_off".into(), with(base.pks.enabled, false)),
                ("pr_on".into(), with(base.pks.enabled, true)),
            ],
            Self::WeightMode => WeightMode::ALL
                .iter()
                .map(|&m| {
                    let mut c = with(true, base.pr.enabled);
                    c.pks.mode = m;
                    (m.as_str().to_string(), c)
                })
                .collect(),
            Self::Components => vec![
                ("baseline".into(), with(false, false)),
                ("pks".into(), with(true, false)),
                ("pr".into(), with(false, true)),
                ("pks+pr".into(), with(true, true)),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub last_accuracy: Vec<f64>,
    pub average_accuracy: Vec<f64>,
    pub average_forgetting: Vec<Option<f64>>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl AblationRow {
    pub fn mean_last(&self) -> f64 {
        mean(&self.last_accuracy)
    }

    pub fn mean_average(&self) -> f64 {
        mean(&self.average_accuracy)
    }

    pub fn mean_forgetting(&self) -> Option<f64> {
        let f: Option<Vec<f64>> = self.average_forgetting.iter().copied().collect();
        f.map(|f| mean(&f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let seeds = &self.rows[0].seeds;
        let mut header = vec!["variant".to_string()];
        header.extend(seeds.iter().map(|s| format!("last_seed{s}")));
        header.extend(["last_mean", "avg_mean", "forgetting_mean"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut record = vec![r.variant.clone()];
            record.extend(r.last_accuracy.iter().map(f64::to_string));
            record.push(r.mean_last().to_string());
            record.push(r.mean_average().to_string());
            record.push(
                r.mean_forgetting()
                    .map(|f| f.to_string())
                    .unwrap_or_default(),
            );
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Side-by-side Last accuracy per variant, in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let seeds = &self.rows[0].seeds;
        let _ = write!(s, "{:<18}", self.axis.as_str());
        for seed in seeds {
            let _ = write!(s, " {:>9}", format!("seed {seed}"));
        }
        let _ = writeln!(s, " {:>9} {:>9} {:>9}", "Last", "Avg", "F");
        for r in &self.rows {
            let _ = write!(s, "{:<18}", r.variant);
            for a in &r.last_accuracy {
                let _ = write!(s, " {:>9.2}", 100.0 * a);
            }
            let f = r
                .mean_forgetting()
                .map(|f| format!("{:.2}", 100.0 * f))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                " {:>9.2} {:>9.2} {:>9}",
                100.0 * r.mean_last(),
                100.0 * r.mean_average(),
                f
            );
        }
        s
    }
}

/// Trains every variant of `axis` for each configured seed under `out_dir`.
pub fn run_ablation(
    config: &ExperimentConfig,
    axis: AblationAxis,
    out_dir: &Path,
) -> Result<AblationReport> {
    config.validate()?;
    let mut rows = Vec::new();
    for (name, variant) in axis.variants(config) {
        let mut row = AblationRow {
            variant: name.clone(),
            seeds: config.ablation.seeds.clone(),
            last_accuracy: Vec::new(),
            average_accuracy: Vec::new(),
            average_forgetting: Vec::new(),
        };
        for &seed in &config.ablation.seeds {
            let mut c = variant.clone();
            c.seed = seed;
            let dir = out_dir
                .join(axis.as_str())
                .join(&name)
                .join(format!("seed_{seed}"));
            let summary = train_run(&c, &dir)?;
            row.last_accuracy.push(summary.report.last_accuracy);
            row.average_accuracy.push(summary.report.average_accuracy);
            row.average_forgetting
                .push(summary.report.average_forgetting);
        }
        rows.push(row);
    }
    let report = AblationReport { axis, rows };
    report.write_csv(&out_dir.join(format!("ablation_{}.csv", axis.as_str())))?;
    Ok(report)
}
