//! Per-task checkpoints: `manifest.json` describing every tensor plus a flat
//! little-endian f64 payload in `tensors.bin`.
//!
//! A checkpoint holds model parameters and one center per learned class.
//! [`audit`] verifies that nothing else is stored.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{IncrementalModel, ModelConfig, ParamGroup};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::prototype::PrototypeStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const MODEL_PREFIX: &str = "model.";
const PROTOTYPE_PREFIX: &str = "prototype.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into `tensors.bin`, in f64 elements.
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub class_id: usize,
    pub task_id: usize,
    pub sample_count: usize,
    pub finalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub task: usize,
    pub seed: u64,
    pub num_classes: usize,
    /// Learned classes in classifier row order.
    pub classes: Vec<usize>,
    pub config: ExperimentConfig,
    pub tensors: Vec<TensorEntry>,
    pub prototypes: Vec<PrototypeEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: IncrementalModel,
    pub store: PrototypeStore,
}

fn ckpt_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `bytes` next to `path` and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn task_dir(root: &Path, task: usize) -> PathBuf {
    root.join("checkpoints").join(format!("task_{task}"))
}

pub fn save(
    dir: &Path,
    task: usize,
    model: &IncrementalModel,
    store: &PrototypeStore,
    classes: &[usize],
    config: &ExperimentConfig,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, values: &mut dyn Iterator<Item = f64>| {
        let mut n = 0;
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
            n += 1;
        }
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
        });
        offset += n;
    };
    for (name, t) in model.named_tensors() {
        push(
            format!("{MODEL_PREFIX}{name}"),
            t.shape().to_vec(),
            &mut t.iter().copied(),
        );
    }
    let mut prototypes = Vec::new();
    for p in store.iter() {
        push(
            format!("{PROTOTYPE_PREFIX}{}", p.class_id),
            vec![p.center.len()],
            &mut p.center.iter().copied(),
        );
        prototypes.push(PrototypeEntry {
            class_id: p.class_id,
            task_id: p.task_id,
            sample_count: p.sample_count,
            finalized: p.finalized,
        });
    }
    let manifest = CheckpointManifest {
        task,
        seed: config.seed,
        num_classes: model.head.num_classes(),
        classes: classes.to_vec(),
        config: config.clone(),
        tensors,
        prototypes,
    };
    write_atomic(&dir.join(TENSORS_FILE), &payload)?;
    write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| ckpt_error(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| ckpt_error(&path, e.to_string()))
}

fn read_payload(dir: &Path, manifest: &CheckpointManifest) -> Result<Vec<f64>> {
    let path = dir.join(TENSORS_FILE);
    let bytes = fs::read(&path).map_err(|e| ckpt_error(&path, e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(ckpt_error(&path, "payload length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let expected: usize = manifest.tensors.iter().map(TensorEntry::len).sum();
    if values.len() != expected {
        return Err(ckpt_error(
            &path,
            format!(
                "payload holds {} values, manifest describes {expected}",
                values.len()
            ),
        ));
    }
    Ok(values)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let values = read_payload(dir, &manifest)?;
    let path = dir.join(TENSORS_FILE);
    let slice = |e: &TensorEntry| -> Result<&[f64]> {
        values
            .get(e.offset..e.offset + e.len())
            .ok_or_else(|| ckpt_error(&path, format!("tensor {} lies outside the payload", e.name)))
    };

    let model_config = ModelConfig {
        num_classes_initial: manifest.num_classes,
        ..manifest.config.model.clone()
    };
    // Parameters are overwritten below; the generator only fixes shapes.
    let mut model = IncrementalModel::new(&model_config, &mut ChaCha8Rng::seed_from_u64(0))?;
    {
        let mut targets = model.named_tensors_mut();
        let entries: Vec<&TensorEntry> = manifest
            .tensors
            .iter()
            .filter(|e| e.name.starts_with(MODEL_PREFIX))
            .collect();
        if entries.len() != targets.len() {
            return Err(ckpt_error(
                &path,
                format!(
                    "{} model tensors stored, model has {}",
                    entries.len(),
                    targets.len()
                ),
            ));
        }
        for ((name, target), entry) in targets.iter_mut().zip(entries) {
            if entry.name[MODEL_PREFIX.len()..] != **name || entry.shape != target.shape() {
                return Err(ckpt_error(
                    &path,
                    format!(
                        "tensor {} {:?} does not match {name} {:?}",
                        entry.name,
                        entry.shape,
                        target.shape()
                    ),
                ));
            }
            for (dst, src) in target.iter_mut().zip(slice(entry)?) {
                *dst = *src;
            }
        }
    }

    let mut store = PrototypeStore::new(model_config.embed_dim);
    for p in &manifest.prototypes {
        let name = format!("{PROTOTYPE_PREFIX}{}", p.class_id);
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ckpt_error(&path, format!("missing tensor {name}")))?;
        let center = Array1::from_vec(slice(entry)?.to_vec());
        if p.finalized {
            store.insert_finalized(p.class_id, p.task_id, center, p.sample_count)?;
        } else {
            return Err(ckpt_error(
                &path,
                format!("prototype {} was saved before finalization", p.class_id),
            ));
        }
    }
    Ok(Checkpoint {
        manifest,
        model,
        store,
    })
}

/// What a checkpoint directory holds, by category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub parameter_values: usize,
    pub prototype_values: usize,
    pub num_prototypes: usize,
    pub files: Vec<String>,
}

/// Checks that a checkpoint holds only model parameters, one `d`-vector per
/// class, and its manifest.
pub fn audit(dir: &Path) -> Result<AuditReport> {
    let manifest = read_manifest(dir)?;
    let values = read_payload(dir, &manifest)?;
    let mut files: Vec<String> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    if files != [MANIFEST_FILE, TENSORS_FILE] {
        return Err(ckpt_error(dir, format!("unexpected files {files:?}")));
    }

    let model_config = ModelConfig {
        num_classes_initial: manifest.num_classes,
        ..manifest.config.model.clone()
    };
    let reference = IncrementalModel::new(&model_config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> = reference
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("{MODEL_PREFIX}{n}"), t.shape().to_vec()))
        .collect();

    let d = model_config.embed_dim;
    let mut parameter_values = 0;
    let mut prototype_values = 0;
    let mut num_prototypes = 0;
    for e in &manifest.tensors {
        if let Some(class) = e.name.strip_prefix(PROTOTYPE_PREFIX) {
            let class: usize = class
                .parse()
                .map_err(|_| ckpt_error(dir, format!("malformed prototype tensor {}", e.name)))?;
            if e.shape != [d] {
                return Err(ckpt_error(
                    dir,
                    format!("prototype {class} has shape {:?}", e.shape),
                ));
            }
            if !manifest.prototypes.iter().any(|p| p.class_id == class) {
                return Err(ckpt_error(
                    dir,
                    format!("prototype {class} has no metadata"),
                ));
            }
            prototype_values += e.len();
            num_prototypes += 1;
        } else if expected.iter().any(|(n, s)| *n == e.name && *s == e.shape) {
            parameter_values += e.len();
        } else {
            return Err(ckpt_error(
                dir,
                format!("tensor {} is neither a parameter nor a prototype", e.name),
            ));
        }
    }
    if num_prototypes != manifest.prototypes.len() || num_prototypes != manifest.classes.len() {
        return Err(ckpt_error(
            dir,
            "prototype count differs from the number of learned classes",
        ));
    }
    if parameter_values != reference.num_params()
        || parameter_values + prototype_values != values.len()
    {
        return Err(ckpt_error(
            dir,
            "payload size does not match parameters plus prototypes",
        ));
    }
    Ok(AuditReport {
        parameter_values,
        prototype_values,
        num_prototypes,
        files,
    })
}
