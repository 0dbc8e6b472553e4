//! Run configuration: one flat JSON object holding the model fields plus
//! training, data and output settings.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use pointabm::data::ShapeKind;
use pointabm::model::{ModelConfig, TrainConfig};
use pointabm::pointops::AugmentConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Everything in a run besides the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Falls back to `PABM_SEED`, then 0.
    pub seed: Option<u64>,
    pub augment_scale: bool,
    pub augment_translate: bool,
    pub augment_rotate: bool,
    /// Augment during pretraining too.
    pub pretrain_augment: bool,
    /// Directory holding `train_manifest.tsv` / `test_manifest.tsv`; when
    /// unset, a synthetic dataset is generated.
    pub data: Option<PathBuf>,
    pub shapes: Vec<ShapeKind>,
    pub n_per_class: usize,
    /// Test samples per class; 0 means 20%.
    pub n_test_per_class: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub out: PathBuf,
    /// Checkpoint every this many epochs (0: only at the end).
    pub save_every: usize,
    /// Checkpoint to initialize from (full or encoder-only).
    pub init: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr_max: 1e-3,
            lr_min: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: None,
            augment_scale: true,
            augment_translate: true,
            augment_rotate: false,
            pretrain_augment: false,
            data: None,
            shapes: ShapeKind::ALL.to_vec(),
            n_per_class: 50,
            n_test_per_class: 0,
            noise: 0.02,
            data_seed: 0,
            out: PathBuf::from("run"),
            save_every: 0,
            init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub run: RunOptions,
    /// Keys set explicitly by the file or overrides.
    pub explicit: BTreeSet<String>,
}

fn keys_of<T: Serialize>(v: &T) -> BTreeSet<String> {
    match serde_json::to_value(v).expect("config serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!("configs are structs"),
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::usage(msg)
}

impl RunConfig {
    /// Builds a config from a flat JSON object.
    pub fn from_map(map: Map<String, Value>) -> Result<Self, CliError> {
        let model_keys = keys_of(&ModelConfig::default());
        let run_keys = keys_of(&RunOptions::default());
        let (mut model, mut run) = (Map::new(), Map::new());
        for (k, v) in map.iter() {
            if model_keys.contains(k) {
                model.insert(k.clone(), v.clone());
            } else if run_keys.contains(k) {
                run.insert(k.clone(), v.clone());
            } else {
                return Err(invalid(format!("unknown config key {k:?}")));
            }
        }
        let model: ModelConfig =
            serde_json::from_value(Value::Object(model)).map_err(|e| invalid(format!("config: {e}")))?;
        let run: RunOptions =
            serde_json::from_value(Value::Object(run)).map_err(|e| invalid(format!("config: {e}")))?;
        let cfg = Self {
            model,
            run,
            explicit: map.keys().cloned().collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        match serde_json::from_str(text) {
            Ok(Value::Object(m)) => Self::from_map(m),
            Ok(_) => Err(invalid("config must be a JSON object")),
            Err(e) => Err(invalid(format!("config: {e}"))),
        }
    }

    /// Reads `path` (if any), then applies overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
                match serde_json::from_str(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(invalid(format!("{}: config must be a JSON object", p.display()))),
                    Err(e) => return Err(invalid(format!("{}: {e}", p.display()))),
                }
            }
            None => Map::new(),
        };
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(map)
    }

    /// Flat JSON object with every field.
    pub fn to_map(&self) -> Map<String, Value> {
        let mut map = Map::new();
        for part in [serde_json::to_value(&self.model), serde_json::to_value(&self.run)] {
            if let Value::Object(m) = part.expect("config serializes") {
                map.extend(m);
            }
        }
        map
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_map())).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        let m = self.model.mask_ratio;
        if !(m > 0.0 && m < 1.0) {
            return Err(invalid(format!("mask_ratio {m} outside (0, 1)")));
        }
        let r = &self.run;
        if r.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(r.lr_max >= 0.0 && r.lr_min >= 0.0 && r.lr_min <= r.lr_max && r.lr_max.is_finite()) {
            return Err(invalid(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                r.lr_min, r.lr_max
            )));
        }
        if !(r.weight_decay >= 0.0 && r.weight_decay.is_finite()) {
            return Err(invalid("weight_decay must be non-negative"));
        }
        if !((0.0..1.0).contains(&r.beta1) && (0.0..1.0).contains(&r.beta2) && r.epsilon > 0.0) {
            return Err(invalid("betas must lie in [0, 1) and epsilon must be positive"));
        }
        if r.data.is_none() {
            if r.shapes.is_empty() {
                return Err(invalid("shapes must not be empty"));
            }
            if r.n_per_class < 2 {
                return Err(invalid("n_per_class must be at least 2"));
            }
            if r.n_test_per_class >= r.n_per_class {
                return Err(invalid("n_test_per_class must be below n_per_class"));
            }
            if !(r.noise >= 0.0 && r.noise.is_finite()) {
                return Err(invalid("noise must be non-negative"));
            }
        }
        Ok(())
    }

    /// `--seed`, then the config's `seed`, then `PABM_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = flag.or(self.run.seed) {
            return Ok(s);
        }
        match std::env::var("PABM_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| invalid(format!("PABM_SEED={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn train_config(&self, pretrain: bool) -> TrainConfig {
        let r = &self.run;
        let on = !pretrain || r.pretrain_augment;
        TrainConfig {
            epochs: r.epochs,
            batch_size: r.batch_size,
            lr_max: r.lr_max,
            lr_min: r.lr_min,
            weight_decay: r.weight_decay,
            beta1: r.beta1,
            beta2: r.beta2,
            epsilon: r.epsilon,
            augment: AugmentConfig {
                scale: on && r.augment_scale,
                translate: on && r.augment_translate,
                rotate: on && r.augment_rotate,
            },
        }
    }
}

/// Parses a `key=value` override. The value is read as JSON, or as a plain
/// string when it is not valid JSON.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
