//! Flat dotted-key run configuration.
//!
//! Resolution order: built-in defaults, then the named preset, then the JSON
//! file, then `--set key=value` overrides. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use soba_core::loss::LossConfig;
use soba_core::model::{BcaOrder, ModelConfig, OgaVariant};

use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusCfg {
    pub path: PathBuf,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunCfg {
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegCfg {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// `ce` or `som`.
    pub loss: String,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaCfg {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// Train with zeroed visual tokens.
    pub question_only: bool,
}

/// Architecture keys; vocabulary sizes and image size come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub channels: usize,
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
    pub vsa_depth: usize,
    pub bca_depth: usize,
    pub stride: usize,
    pub word_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub oga_reduction: usize,
    pub bca_order: BcaOrder,
    pub oga_variant: OgaVariant,
    pub conv_bias: bool,
}

impl ModelCfg {
    fn from_model(m: &ModelConfig) -> Self {
        Self {
            channels: m.channels,
            d_model: m.d_model,
            ffn_hidden: m.ffn_hidden,
            heads: m.heads,
            vsa_depth: m.vsa_depth,
            bca_depth: m.bca_depth,
            stride: m.stride,
            word_dim: m.word_dim,
            lstm_hidden: m.lstm_hidden,
            lstm_layers: m.lstm_layers,
            oga_reduction: m.oga_reduction,
            bca_order: m.bca_order,
            oga_variant: m.oga_variant,
            conv_bias: m.conv_bias,
        }
    }

    pub fn build(&self, image_size: usize, question_vocab: usize, answer_vocab: usize, count_cap: u32) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            d_model: self.d_model,
            ffn_hidden: self.ffn_hidden,
            heads: self.heads,
            vsa_depth: self.vsa_depth,
            bca_depth: self.bca_depth,
            stride: self.stride,
            image_size,
            num_classes: soba_core::geo::NUM_CLASSES,
            question_vocab,
            answer_vocab,
            word_dim: self.word_dim,
            lstm_hidden: self.lstm_hidden,
            lstm_layers: self.lstm_layers,
            oga_reduction: self.oga_reduction,
            bca_order: self.bca_order,
            oga_variant: self.oga_variant,
            count_cap,
            conv_bias: self.conv_bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCfg {
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `desk` or `full`.
    pub preset: String,
    pub corpus: CorpusCfg,
    pub run: RunCfg,
    pub seg: SegCfg,
    pub vqa: VqaCfg,
    pub model: ModelCfg,
    pub loss: LossConfig,
    pub sweep: SweepCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            corpus: CorpusCfg {
                path: "corpus".into(),
                seed: 1,
                n_train: 200,
                n_val: 60,
                n_test: 60,
            },
            run: RunCfg {
                seed: 0,
                out_dir: "runs/default".into(),
            },
            seg: SegCfg {
                steps: 2000,
                batch_size: 8,
                lr: 1e-3,
                eval_every: 250,
                loss: "ce".into(),
                augment: true,
            },
            vqa: VqaCfg {
                steps: 4000,
                batch_size: 8,
                lr: 1e-3,
                eval_every: 500,
                question_only: false,
            },
            model: ModelCfg::from_model(&ModelConfig::desk(1, 1)),
            loss: LossConfig::default(),
            sweep: SweepCfg { seeds: vec![0, 1, 2] },
        }
    }
}

/// Published full-scale hyperparameters.
fn full_preset() -> BTreeMap<String, Value> {
    let m = ModelCfg::from_model(&ModelConfig::full(1, 1));
    let mut out = flatten(&serde_json::to_value(m).expect("serializable"), "model");
    for (k, v) in [
        ("seg.steps", Value::from(15_000)),
        ("vqa.steps", Value::from(40_000)),
        ("vqa.batch_size", Value::from(16)),
        ("seg.batch_size", Value::from(16)),
        ("vqa.lr", Value::from(5e-5)),
    ] {
        out.insert(k.to_string(), v);
    }
    out
}

fn flatten(v: &Value, prefix: &str) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                out.extend(flatten(v, &key));
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefix keys are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Parses `key=value`; the value is JSON when it parses, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value), HarnessError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("serializable"), "")
    }

    /// Resolves defaults, preset, optional file and overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, HarnessError> {
        let defaults = Self::default().to_flat();
        let mut user: Vec<(String, Value)> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            let map: Map<String, Value> =
                serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            for (k, v) in map {
                if v.is_object() {
                    return Err(HarnessError::Config(format!("{}: key {k:?} must be a flat dotted key", path.display())));
                }
                user.push((k, v));
            }
        }
        user.extend(overrides.iter().cloned());
        for (k, _) in &user {
            if !defaults.contains_key(k) {
                return Err(HarnessError::Config(format!("unknown config key {k:?}")));
            }
        }
        let mut flat = defaults;
        let preset = user
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str().unwrap_or_default().to_string())
            .unwrap_or_else(|| "desk".into());
        match preset.as_str() {
            "desk" => {}
            "full" => flat.extend(full_preset()),
            other => return Err(HarnessError::Config(format!("unknown preset {other:?}"))),
        }
        flat.extend(user);
        let cfg: RunConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if !matches!(cfg.seg.loss.as_str(), "ce" | "som") {
            return Err(HarnessError::Config(format!("seg.loss must be ce or som, got {:?}", cfg.seg.loss)));
        }
        if cfg.seg.batch_size < 2 || cfg.vqa.batch_size < 2 {
            return Err(HarnessError::Config("batch sizes must be at least 2 for batch statistics".into()));
        }
        Ok(cfg)
    }

    /// Same configuration with some keys replaced.
    pub fn with(&self, overrides: &[(&str, Value)]) -> Result<Self, HarnessError> {
        let mut flat = self.to_flat();
        for (k, v) in overrides {
            if !flat.contains_key(*k) {
                return Err(HarnessError::Config(format!("unknown config key {k:?}")));
            }
            flat.insert(k.to_string(), v.clone());
        }
        serde_json::from_value(unflatten(&flat)).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Pretty flat JSON, the form accepted by `--config`.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_flat()).expect("serializable");
        s.push('\n');
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let p = dir.join("config.resolved.json");
        std::fs::write(&p, self.to_json()).map_err(|e| HarnessError::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_flat_json() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, cfg.to_json()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let o = [parse_override("model.bca_order=LLLLLL").unwrap(), parse_override("loss.alpha=2").unwrap()];
        let cfg = RunConfig::resolve(None, &o).unwrap();
        assert_eq!(cfg.model.bca_order, BcaOrder::Llllll);
        assert_eq!(cfg.loss.alpha, 2.0);
        let bad = [parse_override("model.depth=3").unwrap()];
        assert!(matches!(RunConfig::resolve(None, &bad), Err(HarnessError::Config(_))));
    }

    #[test]
    fn full_preset_sets_published_sizes() {
        let cfg = RunConfig::resolve(None, &[parse_override("preset=full").unwrap()]).unwrap();
        assert_eq!(cfg.model.d_model, 384);
        assert_eq!(cfg.vqa.batch_size, 16);
        let cfg = RunConfig::resolve(None, &[parse_override("preset=full").unwrap(), parse_override("model.d_model=64").unwrap()]).unwrap();
        assert_eq!(cfg.model.d_model, 64);
    }
}
