//! Run configuration: a flat TOML key/value file plus `--set key=value`
//! overrides, resolved into typed settings. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::series::Frequency;
use crate::synth::GeneratorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            warmup_ratio: 0.01,
            total_steps: 2000,
            batch_size: 8,
            grad_clip_norm: 1.0,
            seed: 0,
            precision: Precision::F32,
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_init <= 0.0 {
            return Err(Error::contract("lr_init must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::contract("warmup_ratio must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        self.model.validate()
    }
}

/// Dataset-evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct EvalSettings {
    /// 0 → smallest active head horizon.
    pub horizon: usize,
    /// Overrides the frequency-derived season length.
    pub season: Option<usize>,
    pub csv: bool,
}


/// Everything the CLI can configure, in one serializable record so runs
/// can log their fully resolved configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Settings {
    pub train: TrainConfig,
    pub synth: GeneratorSpec,
    pub synth_count: usize,
    pub synth_augment: bool,
    /// Corpus path (manifest `.json` or series `.jsonl`) for training.
    pub data: Option<String>,
    pub eval: EvalSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            train: TrainConfig::default(),
            synth: GeneratorSpec::default(),
            synth_count: 256,
            synth_augment: false,
            data: None,
            eval: EvalSettings::default(),
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::format(format!("key {key}: expected a number, got {v}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::format(format!("key {key}: expected a non-negative integer, got {v}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(Error::format(format!("key {key}: expected a non-negative integer, got {v}"))),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    match v {
        Value::Boolean(b) => Ok(*b),
        _ => Err(Error::format(format!("key {key}: expected a boolean, got {v}"))),
    }
}

fn as_str(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        _ => Err(Error::format(format!("key {key}: expected a string, got {v}"))),
    }
}

fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::Array(items) => items.iter().map(|i| as_usize(key, i)).collect(),
        _ => Err(Error::format(format!("key {key}: expected an integer array, got {v}"))),
    }
}

fn as_f64_list(key: &str, v: &Value) -> Result<Vec<f64>> {
    match v {
        Value::Array(items) => items.iter().map(|i| as_f64(key, i)).collect(),
        _ => Err(Error::format(format!("key {key}: expected a number array, got {v}"))),
    }
}

fn apply_key(settings: &mut Settings, key: &str, value: &Value) -> Result<()> {
    let t = &mut settings.train;
    let m = &mut t.model;
    match key {
        "lr_init" => t.lr_init = as_f64(key, value)?,
        "warmup_ratio" => t.warmup_ratio = as_f64(key, value)?,
        "total_steps" => t.total_steps = as_u64(key, value)?,
        "batch_size" => t.batch_size = as_usize(key, value)?,
        "grad_clip_norm" => t.grad_clip_norm = as_f64(key, value)?,
        "seed" => t.seed = as_u64(key, value)?,
        "precision" => {
            t.precision = match as_str(key, value)?.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => return Err(Error::format(format!("precision must be f32 or f64, got {other}"))),
            }
        }
        "patch_size" => m.patch_size = as_usize(key, value)?,
        "context_length" => m.context_length = as_usize(key, value)?,
        "d_model" => m.d_model = as_usize(key, value)?,
        "d_ff" => m.d_ff = as_usize(key, value)?,
        "embed_hidden" => m.embed_hidden = as_usize(key, value)?,
        "layers" => m.layers = as_usize(key, value)?,
        "block_schedule" => m.block_schedule = as_usize_list(key, value)?,
        "query_heads" => m.query_heads = as_usize(key, value)?,
        "kv_heads" => m.kv_heads = as_usize(key, value)?,
        "horizons" => m.horizons = as_usize_list(key, value)?,
        "quantiles" => m.quantiles = as_f64_list(key, value)?,
        "standard_attention" => m.toggles.standard_attention = as_bool(key, value)?,
        "causal_intra" => m.toggles.causal_intra = as_bool(key, value)?,
        "prenorm" => m.toggles.prenorm = as_bool(key, value)?,
        "uniform_block_size" => m.toggles.uniform_block_size = Some(as_usize(key, value)?),
        "head_set" => m.toggles.head_set = Some(as_usize_list(key, value)?),
        "data" => settings.data = Some(as_str(key, value)?),
        "synth_count" => settings.synth_count = as_usize(key, value)?,
        "synth_seed" => settings.synth.seed = as_u64(key, value)?,
        "synth_len_min" => settings.synth.len_range.0 = as_usize(key, value)?,
        "synth_len_max" => settings.synth.len_range.1 = as_usize(key, value)?,
        "synth_max_components" => settings.synth.max_components = as_usize(key, value)?,
        "synth_frequency" => settings.synth.frequency = Frequency::parse(&as_str(key, value)?)?,
        "synth_augment" => settings.synth_augment = as_bool(key, value)?,
        "eval_horizon" => settings.eval.horizon = as_usize(key, value)?,
        "eval_season" => settings.eval.season = Some(as_usize(key, value)?),
        "eval_csv" => settings.eval.csv = as_bool(key, value)?,
        unknown => return Err(Error::format(format!("unknown configuration key {unknown:?}"))),
    }
    Ok(())
}

/// Named ablation toggle, as accepted by `--ablate`.
pub fn apply_ablation(settings: &mut Settings, name: &str) -> Result<()> {
    let toggles = &mut settings.train.model.toggles;
    let (key, arg) = match name.split_once('=') {
        Some((k, v)) => (k, Some(v)),
        None => (name, None),
    };
    match key {
        "standard_attention" => toggles.standard_attention = true,
        "causal_intra" => toggles.causal_intra = true,
        "uniform_block_size" => {
            let b = match arg {
                Some(v) => v
                    .parse::<usize>()
                    .map_err(|_| Error::format(format!("uniform_block_size={v} is not an integer")))?,
                None => *settings
                    .train
                    .model
                    .block_schedule
                    .iter()
                    .min()
                    .ok_or_else(|| Error::format("empty block schedule".to_string()))?,
            };
            toggles.uniform_block_size = Some(b);
        }
        "head_set" => {
            let arg = arg.ok_or_else(|| {
                Error::format("head_set ablation needs a horizon, e.g. --ablate head_set=96".to_string())
            })?;
            let horizons = arg
                .split(',')
                .map(|h| h.parse::<usize>().map_err(|_| Error::format(format!("bad horizon {h:?}"))))
                .collect::<Result<Vec<usize>>>()?;
            toggles.head_set = Some(horizons);
        }
        other => {
            return Err(Error::format(format!(
                "unknown ablation {other:?}; expected standard_attention, causal_intra, uniform_block_size[=B], or head_set=H[,H…]"
            )))
        }
    }
    Ok(())
}

/// Resolve settings from an optional TOML file body, `--set` overrides,
/// an optional seed, and ablation names (applied in that order).
pub fn resolve_settings(
    file_body: Option<&str>,
    sets: &[(String, String)],
    seed: Option<u64>,
    ablations: &[String],
) -> Result<Settings> {
    let mut settings = Settings::default();
    if let Some(body) = file_body {
        let table: toml::Table =
            body.parse().map_err(|e| Error::format(format!("config file is not valid TOML: {e}")))?;
        for (key, value) in &table {
            apply_key(&mut settings, key, value)?;
        }
    }
    for (key, raw) in sets {
        let value: Value = raw
            .parse()
            .unwrap_or_else(|_| Value::String(raw.clone()));
        apply_key(&mut settings, key, &value)?;
    }
    if let Some(seed) = seed {
        settings.train.seed = seed;
        settings.synth.seed = seed;
    }
    for name in ablations {
        apply_ablation(&mut settings, name)?;
    }
    settings.train.validate()?;
    Ok(settings)
}
