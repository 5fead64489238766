use std::io::Write;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn synthetic_config() -> DataConfig {
    DataConfig::default()
}

#[test]
fn synthetic_is_deterministic() {
    let a = load_dataset(&synthetic_config(), 16, 3).unwrap();
    let b = load_dataset(&synthetic_config(), 16, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(a.train.len(), 800);
    assert_eq!(a.test.len(), 200);
    let mut other = synthetic_config();
    other.seed += 1;
    assert_ne!(
        load_dataset(&other, 16, 3).unwrap().fingerprint(),
        a.fingerprint()
    );
}

#[test]
fn unknown_dataset_is_an_ingestion_error() {
    let mut cfg = synthetic_config();
    cfg.name = "imagenet-sub".into();
    assert!(matches!(
        load_dataset(&cfg, 16, 3),
        Err(Error::Ingestion { .. })
    ));
}

#[test]
fn train_and_test_partitions_are_disjoint() {
    let split = load_dataset(&synthetic_config(), 16, 3).unwrap();
    for i in 0..split.test.len() {
        let t = split.test.images.index_axis(Axis(0), i);
        for j in 0..split.train.len() {
            assert_ne!(t, split.train.images.index_axis(Axis(0), j));
        }
    }
}

/// One-pass linear probe: class means over the training set define the
/// linear scores `mu_c . x - |mu_c|^2 / 2`.
fn linear_probe_accuracy(split: &DataSplit) -> f64 {
    let dim = split.train.images.len() / split.train.len();
    let k = split.train.num_classes;
    let mut means = vec![Array1::<f64>::zeros(dim); k];
    let mut counts = vec![0usize; k];
    for i in 0..split.train.len() {
        let x = split.train.image(i).into_shape_with_order(dim).unwrap();
        means[split.train.labels[i]] += &x;
        counts[split.train.labels[i]] += 1;
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        *m /= c as f64;
    }
    let mut correct = 0;
    for i in 0..split.test.len() {
        let x = split.test.image(i).into_shape_with_order(dim).unwrap();
        let pred = (0..k)
            .map(|c| (c, means[c].dot(&x) - 0.5 * means[c].dot(&means[c])))
            .fold((0, f64::NEG_INFINITY), |best, (c, s)| {
                if s > best.1 {
                    (c, s)
                } else {
                    best
                }
            })
            .0;
        correct += usize::from(pred == split.test.labels[i]);
    }
    correct as f64 / split.test.len() as f64
}

#[test]
fn synthetic_classes_are_linearly_separable() {
    let split = load_dataset(&synthetic_config(), 16, 3).unwrap();
    let acc = linear_probe_accuracy(&split);
    assert!(acc >= 0.95, "linear probe accuracy {acc}");
}

fn write_cifar_records(path: &std::path::Path, labels: &[u8]) {
    let mut f = std::fs::File::create(path).unwrap();
    for &l in labels {
        let mut rec = vec![0u8; 3074];
        rec[0] = 1;
        rec[1] = l;
        for (i, b) in rec[2..].iter_mut().enumerate() {
            *b = (i % 251) as u8;
        }
        f.write_all(&rec).unwrap();
    }
}

#[test]
fn cifar_binary_loader() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar_records(&dir.path().join("train.bin"), &[3, 99, 0]);
    write_cifar_records(&dir.path().join("test.bin"), &[7]);
    let cfg = DataConfig {
        name: "cifar100".into(),
        path: Some(dir.path().display().to_string()),
        ..DataConfig::default()
    };
    let split = load_dataset(&cfg, 32, 3).unwrap();
    assert_eq!(split.train.labels, vec![3, 99, 0]);
    assert_eq!(split.test.labels, vec![7]);
    // green channel of pixel (0, 1) comes from byte 1024 + 1
    let expected = ((1025 % 251) as f32 / 255.0 - 0.4865) / 0.2564;
    assert!((split.train.images[[0, 0, 1, 1]] - expected).abs() < 1e-6);
}

#[test]
fn corrupt_cifar_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train.bin"), [1u8, 2, 3]).unwrap();
    let cfg = DataConfig {
        name: "cifar100".into(),
        path: Some(dir.path().display().to_string()),
        ..DataConfig::default()
    };
    match load_dataset(&cfg, 32, 3) {
        Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("train.bin")),
        other => panic!("expected ingestion error, got {other:?}"),
    }
    let missing = DataConfig {
        name: "cifar100".into(),
        path: Some("/nonexistent/cifar".into()),
        ..DataConfig::default()
    };
    assert!(matches!(
        load_dataset(&missing, 32, 3),
        Err(Error::Ingestion { .. })
    ));
}

#[test]
fn epoch_batches_cover_each_index_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let indices: Vec<usize> = (100..165).collect();
    let batches = epoch_batches(&indices, 32, &mut rng);
    assert!(batches.iter().all(|b| b.len() >= 2));
    let mut all: Vec<usize> = batches.concat();
    all.sort();
    assert_eq!(all, indices);
    // 65 = 32 + 33 after folding the lone tail sample
    assert_eq!(batches.len(), 2);
}

#[test]
fn augment_without_padding_is_identity_or_mirror() {
    let img = Array3::from_shape_fn((4, 4, 2), |(y, x, c)| (y * 8 + x * 2 + c) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let out = augment(img.view(), 0, &mut rng);
        let mut mirrored = img.clone();
        mirrored.invert_axis(Axis(1));
        assert!(out == img || out == mirrored);
    }
    let padded = augment(img.view(), 2, &mut rng);
    assert_eq!(padded.dim(), (4, 4, 2));
}
