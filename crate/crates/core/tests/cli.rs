use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vit_necil::checkpoint;
use vit_necil::eval::{avg_accuracy, forgetting, AccuracyMatrix};
use vit_necil::pks::compute_patch_weights;
use vit_necil::run::{self, RunManifest};

const TINY: &str = r#"
seed = 3

[model]
image_size = 8
patch_size = 4
embed_dim = 16
num_heads = 2
num_encoder_blocks = 1
num_decoder_blocks = 1
mlp_ratio = 2

[data]
num_classes = 6
train_per_class = 10
test_per_class = 4
base_classes = 2
classes_per_task = 2
num_incremental_tasks = 2

[trainer]
epochs = 2
batch_size = 8

[ablation]
seeds = [0, 1]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vit-necil"))
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn train(config: &Path, run_dir: &Path, overrides: &[&str]) -> String {
    let mut cmd = bin();
    cmd.arg("train")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(run_dir);
    for o in overrides {
        cmd.arg("--override").arg(o);
    }
    ok(cmd.output().unwrap())
}

#[test]
fn shipped_config_is_the_desk_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let config = vit_necil::config::ExperimentConfig::load(&path, &[]).unwrap();
    assert_eq!(config, vit_necil::config::ExperimentConfig::default());
}

#[test]
fn train_writes_the_run_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let run_dir = tmp.path().join("run");
    let stdout = train(&config, &run_dir, &["trainer.epochs=1"]);
    assert!(stdout.contains("last accuracy"));

    let manifest = RunManifest::load(&run_dir).unwrap();
    assert_eq!(manifest.config.trainer.epochs, 1);
    assert_eq!(manifest.seed, 3);
    assert_eq!(manifest.task_spec.num_tasks(), 3);
    assert_eq!(manifest.checkpoints.len(), 3);
    for c in &manifest.checkpoints {
        assert!(run_dir.join(c).join("tensors.bin").exists());
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("task,epoch,loss_total,loss_cil,loss_pks,loss_pr,eval_acc")
    );
    assert_eq!(lines.count(), 3);
    assert!(!metrics.contains('\r'));
}

#[test]
fn same_config_and_seed_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    train(&config, &tmp.path().join("a"), &[]);
    train(&config, &tmp.path().join("b"), &[]);
    let read = |d: &str| fs::read(tmp.path().join(d).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn unknown_config_key_fails_with_its_name() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--override", "trainer.epohcs=1", "--out"])
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("trainer.epohcs"));
}

#[test]
fn eval_rebuilds_a_lower_triangular_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let run_dir = tmp.path().join("run");
    train(&config, &run_dir, &[]);
    let trained = fs::read(run_dir.join("accuracy_matrix.csv")).unwrap();

    let first = ok(bin().arg("eval").arg(&run_dir).output().unwrap());
    let second = ok(bin().arg("eval").arg(&run_dir).output().unwrap());
    assert_eq!(first, second);
    assert_eq!(
        fs::read(run_dir.join("accuracy_matrix.csv")).unwrap(),
        trained
    );

    let matrix = AccuracyMatrix::read_csv(&run_dir.join("accuracy_matrix.csv")).unwrap();
    let lengths: Vec<usize> = matrix.rows().iter().map(Vec::len).collect();
    assert_eq!(lengths, vec![1, 2, 3]);

    let summary = run::eval_run(&run_dir).unwrap();
    assert_eq!(summary.report.accuracies.len(), 3);
    // Acc_m pools every learned class; tasks have equal test sizes here.
    let accs: Vec<f64> = matrix
        .rows()
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    for (a, b) in accs.iter().zip(&summary.report.accuracies) {
        assert!((a - b).abs() < 1e-12);
    }
    let avg = avg_accuracy(&summary.report.accuracies).unwrap();
    assert_eq!(avg, summary.report.average_accuracy);
    let (_, f) = forgetting(&matrix, 3).unwrap();
    assert_eq!(Some(f), summary.report.average_forgetting);
}

#[test]
fn eval_names_the_missing_task() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let run_dir = tmp.path().join("run");
    train(&config, &run_dir, &["trainer.epochs=1"]);
    fs::remove_dir_all(checkpoint::task_dir(&run_dir, 2)).unwrap();
    let out = bin().arg("eval").arg(&run_dir).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("task 2"));
}

#[test]
fn dump_weights_matches_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let run_dir = tmp.path().join("run");
    train(&config, &run_dir, &["trainer.epochs=1"]);
    let csv_path = tmp.path().join("w.csv");
    ok(bin()
        .arg("dump-weights")
        .arg(&run_dir)
        .args(["--task", "2", "--image", "5", "--out"])
        .arg(&csv_path)
        .output()
        .unwrap());
    let text = fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "row,col,weight");
    assert_eq!(rows.len() - 1, 4);

    let manifest = RunManifest::load(&run_dir).unwrap();
    let ckpt = checkpoint::load(&checkpoint::task_dir(&run_dir, 2)).unwrap();
    let (data, _) = run::prepare_data(&manifest.config).unwrap();
    let tokens = ckpt
        .model
        .backbone
        .forward(data.test.image(5).view())
        .unwrap();
    let oracle = compute_patch_weights(
        &tokens,
        manifest.config.pks.mode,
        manifest.config.pks.epsilon,
    )
    .unwrap();
    for (i, line) in rows[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0].parse::<usize>().unwrap(), i / 2);
        assert_eq!(fields[1].parse::<usize>().unwrap(), i % 2);
        let w: f64 = fields[2].parse().unwrap();
        assert!((w - oracle.normalized[i]).abs() < 1e-6);
    }

    let out = bin()
        .arg("dump-weights")
        .arg(&run_dir)
        .args(["--task", "1", "--image", "100000"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("100000"));
}

#[test]
fn degenerate_model_gives_all_ones_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let run_dir = tmp.path().join("run");
    train(
        &config,
        &run_dir,
        &["trainer.epochs=1", "data.num_incremental_tasks=0"],
    );
    let dir = checkpoint::task_dir(&run_dir, 1);
    let mut ckpt = checkpoint::load(&dir).unwrap();
    // Zero parameters make every token identical.
    use vit_necil::backbone::ParamGroup;
    ckpt.model.fill(0.0);
    checkpoint::save(
        &dir,
        1,
        &ckpt.model,
        &ckpt.store,
        &ckpt.manifest.classes,
        &ckpt.manifest.config,
    )
    .unwrap();
    let weights = run::patch_weights(&run_dir, 1, 0).unwrap();
    assert_eq!(weights, vec![1.0; 4]);
}

#[test]
fn ablate_rejects_unknown_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = bin()
        .args(["ablate", "--config"])
        .arg(&config)
        .args(["--axis", "dropout", "--out"])
        .arg(tmp.path().join("abl"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropout"));
}

#[test]
fn weight_mode_ablation_lists_three_modes_stably() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let run_abl = |name: &str| {
        let out = tmp.path().join(name);
        let stdout = ok(bin()
            .args(["ablate", "--config"])
            .arg(&config)
            .args([
                "--axis",
                "weight_mode",
                "--override",
                "trainer.epochs=1",
                "--override",
                "ablation.seeds=[0]",
                "--out",
            ])
            .arg(&out)
            .output()
            .unwrap());
        (
            stdout,
            fs::read(out.join("ablation_weight_mode.csv")).unwrap(),
        )
    };
    let (table, csv_a) = run_abl("a");
    let (_, csv_b) = run_abl("b");
    assert_eq!(csv_a, csv_b);
    let variants: Vec<String> = String::from_utf8(csv_a)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(variants, ["inverse_distance", "uniform", "distance"]);
    assert!(table.contains("Last"));
}

#[test]
fn pks_off_row_matches_a_plain_training_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let abl = tmp.path().join("abl");
    ok(bin()
        .args(["ablate", "--config"])
        .arg(&config)
        .args([
            "--axis",
            "pks_on_off",
            "--override",
            "trainer.epochs=1",
            "--override",
            "ablation.seeds=[3]",
            "--out",
        ])
        .arg(&abl)
        .output()
        .unwrap());
    let plain = tmp.path().join("plain");
    train(&config, &plain, &["trainer.epochs=1", "pks.enabled=false"]);
    let ablated = abl.join("pks_on_off").join("pks_off").join("seed_3");
    for file in ["metrics.csv", "accuracy_matrix.csv"] {
        assert_eq!(
            fs::read(ablated.join(file)).unwrap(),
            fs::read(plain.join(file)).unwrap()
        );
    }
}
