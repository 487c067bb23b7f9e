//! Run configuration: defaults, then a JSON file, then command-line overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use subdepth_core::synth::SceneConfig;
use subdepth_core::train::{ObjectiveMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub triplets: usize,
    pub eval_triplets: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            triplets: 500,
            eval_triplets: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Student seeds; every mode is trained once per seed.
    pub seeds: Vec<u64>,
    pub modes: Vec<ObjectiveMode>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![0, 1, 2],
            modes: ObjectiveMode::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Size of the hardest subset written by `eval`.
    pub hardest_k: usize,
    /// Evaluate on the eval split after every training epoch.
    pub each_epoch: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            hardest_k: 10,
            each_epoch: true,
        }
    }
}

/// Everything a command needs besides file paths.
///
/// `seed` seeds the dataset generator for `gen-data` and the networks for
/// the training commands; it is copied into `train.seed` on resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub ablate: AblateConfig,
    pub eval: EvalConfig,
}

/// Learning rates of the command-line runs: ten times the library
/// defaults, same drop. Networks trained from scratch on the 64x48 scenes
/// barely move within 20 epochs at 1e-4.
pub const DESK_LR_INITIAL: f64 = 1e-3;
pub const DESK_LR_FINETUNE: f64 = 1e-4;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train: TrainConfig {
                lr_initial: DESK_LR_INITIAL,
                lr_finetune: DESK_LR_FINETUNE,
                ..Default::default()
            },
            scene: SceneConfig::default(),
            data: DataConfig::default(),
            ablate: AblateConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Read a config file. A run manifest is accepted too, in which case its
/// recorded config is used.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if value.get("command").is_some() {
        if let Some(cfg) = value.get_mut("config") {
            return Ok(cfg.take());
        }
    }
    if !value.is_object() {
        bail!("config {} must be a JSON object", path.display());
    }
    Ok(value)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse `section.key=value`; the value is read as JSON and falls back to a
/// plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s.split_once('=').with_context(|| format!("override {s:?} is not key=value"))?;
    if key.is_empty() {
        bail!("override {s:?} has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) {
    let mut cur = root;
    for (i, k) in path.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == path.len() {
            obj.insert(k.clone(), value);
            return;
        }
        cur = obj.entry(k.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
}

/// Layered config: defaults, then `file`, then `overrides` in order.
pub fn resolve(file: Option<Value>, overrides: &[(Vec<String>, Value)]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(f) = file {
        merge(&mut value, f);
    }
    for (path, v) in overrides {
        set_path(&mut value, path, v.clone());
    }
    let mut cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
    cfg.train.seed = cfg.seed;
    cfg.train.validate()?;
    cfg.scene.validate()?;
    Ok(cfg)
}

/// `WxH`, e.g. `64x48`.
pub fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad resolution {s:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn precedence_is_cli_over_file_over_defaults() {
        let file = json!({"seed": 3, "train": {"epochs": 7, "batch_size": 2}});
        let cfg = resolve(Some(file.clone()), &[]).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.train.epochs, cfg.train.batch_size), (3, 3, 7, 2));
        // a partial train section keeps the run defaults for the other keys
        assert_eq!((cfg.train.lr_initial, cfg.train.lr_finetune), (DESK_LR_INITIAL, DESK_LR_FINETUNE));
        assert_eq!(cfg.train.lr_switch_epoch, TrainConfig::default().lr_switch_epoch);
        let cfg = resolve(Some(file), &[parse_override("train.epochs=9").unwrap()]).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.batch_size), (9, 2));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(resolve(Some(json!({"train": {"epochz": 1}})), &[]).is_err());
        assert!(resolve(None, &[parse_override("train.objective_mode=bogus").unwrap()]).is_err());
        assert!(resolve(None, &[parse_override("train.epochs=0").unwrap()]).is_err());
        let cfg = resolve(None, &[parse_override("train.objective_mode=subdepth").unwrap()]).unwrap();
        assert_eq!(cfg.train.objective_mode, ObjectiveMode::Subdepth);
    }

    #[test]
    fn resolution_parsing() {
        assert_eq!(parse_resolution("64x48"), Ok((64, 48)));
        assert!(parse_resolution("64").is_err());
        assert!(parse_resolution("ax4").is_err());
    }
}
