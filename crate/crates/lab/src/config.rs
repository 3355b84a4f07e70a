//! TOML run configuration.
//!
//! Every section is optional and falls back to the desk defaults; unknown keys
//! are rejected. `lds.total_steps` and `lds.num_layers` are not configurable:
//! they follow from the dataset size, batch size and model depth.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sts_core::data::{Rule, SyntheticSpec};
use sts_core::model::ModelConfig;
use sts_core::trainer::{AdamConfig, StageSet};
use sts_core::{CompressionSpec, SkipSchedule, Stage, Strategy, TrainConfig};

use crate::LabError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub vtc: VtcSection,
    #[serde(default)]
    pub lds: LdsSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_visual_tokens: usize,
    pub max_seq_len: usize,
    pub patch_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_samples: usize,
    pub rule: Rule,
    pub instruction_len: usize,
    pub response_len: usize,
    pub levels: usize,
    pub noise: f64,
    pub instruction_vocab: usize,
    pub response_base: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VtcSection {
    pub strategy: Strategy,
    pub p: f64,
    pub seed: u64,
    pub enabled: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdsSection {
    pub alpha: f64,
    pub epsilon: f64,
    pub enabled: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub seed: u64,
    pub allow_cross_stage: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig::from(&TrainConfig::desk_default())
    }
}

macro_rules! default_from_desk {
    ($($section:ident => $field:ident),*) => {$(
        impl Default for $section {
            fn default() -> Self {
                FileConfig::from(&TrainConfig::desk_default()).$field
            }
        }
    )*};
}

default_from_desk!(ModelSection => model, DatasetSection => dataset, VtcSection => vtc, LdsSection => lds, TrainSection => train);

fn stages(set: StageSet) -> Vec<Stage> {
    [Stage::Alignment, Stage::FineTune].into_iter().filter(|&s| set.contains(s)).collect()
}

fn stage_set(list: &[Stage]) -> StageSet {
    StageSet { alignment: list.contains(&Stage::Alignment), finetune: list.contains(&Stage::FineTune) }
}

impl From<&TrainConfig> for FileConfig {
    fn from(c: &TrainConfig) -> Self {
        let m = c.model;
        let d = c.dataset;
        let v = c.vtc.unwrap_or(CompressionSpec { strategy: Strategy::Uniform, p: 0.5, seed: 0 });
        let l = c.lds.unwrap_or(SkipSchedule { alpha: 0.5, epsilon: 0.5, total_steps: 1, num_layers: 1 });
        FileConfig {
            model: ModelSection {
                d_model: m.d_model,
                n_layers: m.n_layers,
                n_heads: m.n_heads,
                d_ff: m.d_ff,
                vocab_size: m.vocab_size,
                n_visual_tokens: m.n_visual_tokens,
                max_seq_len: m.max_seq_len,
                patch_dim: m.patch_dim,
            },
            dataset: DatasetSection {
                n_samples: d.n_samples,
                rule: d.rule,
                instruction_len: d.instruction_len,
                response_len: d.response_len,
                levels: d.levels,
                noise: d.noise,
                instruction_vocab: d.instruction_vocab,
                response_base: d.response_base,
            },
            vtc: VtcSection { strategy: v.strategy, p: v.p, seed: v.seed, enabled: stages(c.vtc_stages) },
            lds: LdsSection { alpha: l.alpha, epsilon: l.epsilon, enabled: stages(c.lds_stages) },
            train: TrainSection {
                batch_size: c.batch_size,
                seed: c.seed,
                allow_cross_stage: c.allow_cross_stage,
                learning_rate: c.optimizer.learning_rate,
                beta1: c.optimizer.beta1,
                beta2: c.optimizer.beta2,
                eps_adam: c.optimizer.eps_adam,
            },
        }
    }
}

fn schema(key: &str, msg: impl Into<String>) -> LabError {
    LabError::Schema { key: key.into(), message: msg.into() }
}

impl FileConfig {
    /// Checks value ranges, naming the offending key.
    pub fn check(&self) -> Result<(), LabError> {
        let v = &self.vtc;
        if !(v.p > 0.0 && v.p <= 1.0) {
            return Err(schema("vtc.p", format!("must lie in (0, 1], got {}", v.p)));
        }
        let l = &self.lds;
        if !(l.alpha.is_finite() && l.alpha >= 0.0) {
            return Err(schema("lds.alpha", format!("must be finite and >= 0, got {}", l.alpha)));
        }
        if !(l.epsilon.is_finite() && l.epsilon >= 0.0) {
            return Err(schema("lds.epsilon", format!("must be finite and >= 0, got {}", l.epsilon)));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(schema("train.batch_size", "must be at least 1"));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return Err(schema("train.learning_rate", format!("must be positive, got {}", t.learning_rate)));
        }
        for (key, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(schema(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(t.eps_adam.is_finite() && t.eps_adam > 0.0) {
            return Err(schema("train.eps_adam", format!("must be positive, got {}", t.eps_adam)));
        }
        if self.dataset.n_samples == 0 {
            return Err(schema("dataset.n_samples", "must be at least 1"));
        }
        if !t.allow_cross_stage {
            if v.enabled.contains(&Stage::FineTune) {
                return Err(schema(
                    "vtc.enabled",
                    "compression in fine-tuning requires train.allow_cross_stage = true",
                ));
            }
            if l.enabled.contains(&Stage::Alignment) {
                return Err(schema("lds.enabled", "skipping in alignment requires train.allow_cross_stage = true"));
            }
        }
        Ok(())
    }

    pub fn to_train_config(&self) -> Result<TrainConfig, LabError> {
        self.check()?;
        let m = &self.model;
        let d = &self.dataset;
        let t = &self.train;
        let model = ModelConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            vocab_size: m.vocab_size,
            n_visual_tokens: m.n_visual_tokens,
            max_seq_len: m.max_seq_len,
            patch_dim: m.patch_dim,
        };
        let dataset = SyntheticSpec {
            n_samples: d.n_samples,
            rule: d.rule,
            instruction_len: d.instruction_len,
            response_len: d.response_len,
            levels: d.levels,
            noise: d.noise,
            instruction_vocab: d.instruction_vocab,
            response_base: d.response_base,
        };
        let steps = d.n_samples.div_ceil(t.batch_size);
        let cfg = TrainConfig {
            model,
            vtc: Some(CompressionSpec { strategy: self.vtc.strategy, p: self.vtc.p, seed: self.vtc.seed }),
            lds: Some(SkipSchedule {
                alpha: self.lds.alpha,
                epsilon: self.lds.epsilon,
                total_steps: steps,
                num_layers: m.n_layers,
            }),
            vtc_stages: stage_set(&self.vtc.enabled),
            lds_stages: stage_set(&self.lds.enabled),
            allow_cross_stage: t.allow_cross_stage,
            batch_size: t.batch_size,
            optimizer: AdamConfig {
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                eps_adam: t.eps_adam,
            },
            seed: t.seed,
            dataset,
        };
        cfg.validate().map_err(|e| schema("config", e.to_string()))?;
        Ok(cfg)
    }
}

/// Applies `section.key=value` overrides to a parsed document. Values are read
/// as TOML, falling back to a bare string.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<(), LabError> {
    for o in overrides {
        let (path, raw) = o.split_once('=').ok_or_else(|| schema(o, "override must look like section.key=value"))?;
        let path = path.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let mut keys: Vec<&str> = path.split('.').collect();
        let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| schema(path, "empty key"))?;
        let mut node = &mut *table;
        for k in keys {
            let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry.as_table_mut().ok_or_else(|| schema(path, format!("`{k}` is not a section")))?;
        }
        node.insert(last.to_string(), value);
    }
    Ok(())
}

/// Parses a document, applies overrides, and deserializes against the schema.
pub fn parse(text: &str, overrides: &[String]) -> Result<FileConfig, LabError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Syntax(e.to_string()))?;
    apply_overrides(&mut table, overrides)?;
    serde_path_to_error::deserialize(table).map_err(|e| {
        let key = e.path().to_string();
        schema(&key, e.into_inner().to_string())
    })
}

pub fn load(path: &Path, overrides: &[String]) -> Result<FileConfig, LabError> {
    let text = std::fs::read_to_string(path).map_err(|source| LabError::Read { path: path.to_path_buf(), source })?;
    parse(&text, overrides)
}
