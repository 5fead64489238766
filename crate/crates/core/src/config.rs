//! Run configuration: a TOML document whose dotted key paths (`pks.mode`,
//! `trainer.epochs`) are also the names accepted by `--override`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::pks::{WeightMode, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Peak step size; decays to `min_learning_rate` along a cosine within each task.
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Momentum for plain SGD.
    pub momentum: f64,
    /// Evaluate on the learned classes' test split after every epoch.
    pub eval_each_epoch: bool,
    /// Write per-step loss breakdowns to `steps.csv`.
    pub log_steps: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            momentum: 0.9,
            eval_each_epoch: true,
            log_steps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_pks: f64,
    pub lambda_pr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pks: 10.0,
            lambda_pr: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PksConfig {
    pub enabled: bool,
    pub mode: WeightMode,
    pub epsilon: f64,
}

impl Default for PksConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: WeightMode::InverseDistance,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrConfig {
    pub enabled: bool,
    /// Restored old-class prototypes per real sample in each batch.
    pub restore_count_per_sample: usize,
}

impl Default for PrConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            restore_count_per_sample: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeConfig {
    /// Restart each current-task class mean at every epoch so the center
    /// frozen at task end averages the last epoch's embeddings only. Off by
    /// default: the mean then runs over the whole task.
    pub reset_each_epoch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub trainer: TrainerConfig,
    pub loss: LossConfig,
    pub pks: PksConfig,
    pub pr: PrConfig,
    pub prototype: PrototypeConfig,
    pub ablation: AblationConfig,
}


/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: &[&str] = &["data.path"];

fn config_error(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn leaf_keys(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => leaf_keys(t, &key, out),
            _ => out.push(key),
        }
    }
}

fn lookup<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut value = table.get(parts.next()?)?;
    for p in parts {
        value = value.as_table()?.get(p)?;
    }
    Some(value)
}

/// Parses an override value as a TOML literal, falling back to a bare string
/// so that `pks.mode=uniform` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_error("<document>", e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config_error(o.clone(), "override must look like key=value"))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }

        let defaults = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| config_error("<defaults>", e.to_string()))?;
        let mut keys = Vec::new();
        leaf_keys(&table, "", &mut keys);
        for key in &keys {
            let known = OPTIONAL_KEYS.contains(&key.as_str())
                || lookup(&defaults, key).is_some_and(|v| !v.is_table());
            if !known {
                return Err(config_error(key.clone(), "unknown configuration key"));
            }
        }

        let config: ExperimentConfig =
            toml::Value::Table(table.clone())
                .try_into()
                .map_err(|e: toml::de::Error| {
                    config_error(culprit_key(&table, &keys), e.message().to_string())
                })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| config_error("model", e.to_string()))?;
        if self.trainer.epochs == 0 {
            return Err(config_error("trainer.epochs", "must be at least 1"));
        }
        if self.trainer.batch_size < 2 {
            return Err(config_error("trainer.batch_size", "must be at least 2"));
        }
        if !(self.trainer.learning_rate >= 0.0) || !(self.trainer.min_learning_rate >= 0.0) {
            return Err(config_error(
                "trainer.learning_rate",
                "must be non-negative",
            ));
        }
        if !(self.loss.lambda_pks >= 0.0) {
            return Err(config_error("loss.lambda_pks", "must be non-negative"));
        }
        if !(self.loss.lambda_pr >= 0.0) {
            return Err(config_error("loss.lambda_pr", "must be non-negative"));
        }
        if !(self.pks.epsilon > 0.0) {
            return Err(config_error("pks.epsilon", "must be positive"));
        }
        if self.ablation.seeds.is_empty() {
            return Err(config_error("ablation.seeds", "needs at least one seed"));
        }
        Ok(())
    }
}

/// Finds the first key that fails to deserialize on its own against the defaults.
fn culprit_key(table: &toml::Table, keys: &[String]) -> String {
    for key in keys {
        let Some(value) = lookup(table, key) else {
            continue;
        };
        let mut single = toml::Table::new();
        if set_path(&mut single, key, value.clone()).is_err() {
            return key.clone();
        }
        if toml::Value::Table(single)
            .try_into::<ExperimentConfig>()
            .is_err()
        {
            return key.clone();
        }
    }
    "<document>".to_string()
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(key, "malformed key"));
    }
    let mut current = table;
    for p in &parts[..parts.len() - 1] {
        let entry = current
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| config_error(key, format!("`{p}` is not a table")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn default_loss_weights_and_epsilon() {
        let c = ExperimentConfig::default();
        assert_eq!(c.loss.lambda_pks, 10.0);
        assert_eq!(c.loss.lambda_pr, 10.0);
        assert_eq!(c.pks.epsilon, 1e-8);
    }

    #[test]
    fn overrides_apply_with_and_without_quotes() {
        let c = ExperimentConfig::from_toml_str(
            "[trainer]\nepochs = 5\n",
            &[
                "trainer.epochs=1".into(),
                "pks.mode=uniform".into(),
                "pr.enabled=false".into(),
                "data.path=\"/tmp/x\"".into(),
                "seed=42".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.trainer.epochs, 1);
        assert_eq!(c.pks.mode, WeightMode::Uniform);
        assert!(!c.pr.enabled);
        assert_eq!(c.data.path.as_deref(), Some("/tmp/x"));
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("[trainer]\nepochz = 3\n", &[]).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "trainer.epochz"),
            other => panic!("unexpected {other:?}"),
        }
        let err = ExperimentConfig::from_toml_str("", &["pks.modus=uniform".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { key, .. } if key == "pks.modus"));
    }

    #[test]
    fn bad_value_names_the_key() {
        let err = ExperimentConfig::from_toml_str("", &["pks.mode=sideways".into()]).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref key, .. } if key == "pks.mode"),
            "{err:?}"
        );
        let err =
            ExperimentConfig::from_toml_str("", &["trainer.batch_size=1".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "trainer.batch_size"));
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut c = ExperimentConfig::default();
        c.data.path = Some("/data".into());
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(ExperimentConfig::default().hash(), c.hash());
    }
}
