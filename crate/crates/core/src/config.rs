//! Run configuration: built-in defaults < JSON file < `--set key=value`.
//!
//! Unknown keys and type mismatches are rejected with the dotted key path.
//! `model.preset` expands a named ViT preset underneath explicit model keys.
//! `model.img_size` always follows `pretrain.crops.global_size`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SynthConfig;
use crate::error::{Error, IoContext, Result};
use crate::eval::ExtractMode;
use crate::finetune::FinetuneConfig;
use crate::pretrain::PretrainConfig;
use crate::vit::VitConfig;
use crate::viz::VizConfig;

pub const RESOLVED_CONFIG: &str = "resolved.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: ExtractMode,
    pub batch_size: usize,
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mode: ExtractMode::FinetunedNeck, batch_size: 32, knn_k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dtype: Dtype,
    pub model: VitConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub viz: VizConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            dtype: Dtype::F32,
            model: VitConfig::micro(),
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            viz: VizConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.img_size != self.pretrain.crops.global_size {
            return Err(Error::Config(format!(
                "model.img_size {:?} differs from pretrain.crops.global_size {:?}",
                self.model.img_size, self.pretrain.crops.global_size
            )));
        }
        self.synth.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.eval.batch_size == 0 || self.eval.knn_k == 0 {
            return Err(Error::Config("eval.batch_size and eval.knn_k must be at least 1".into()));
        }
        self.viz.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `resolved.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_json()?).at(&path)?;
        Ok(path)
    }
}

/// Splits `a.b.c=value`; the value is JSON when it parses, a string otherwise.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(String::from).collect(), value))
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() => "a non-negative integer",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn compatible(default: &Value, new: &Value) -> bool {
    match (default, new) {
        (Value::Null, _) | (_, Value::Null) => true,
        (Value::Number(d), Value::Number(n)) => !d.is_u64() || n.is_u64(),
        (Value::Array(d), Value::Array(n)) => d.first().map_or(true, |d0| n.iter().all(|x| compatible(d0, x))),
        _ => std::mem::discriminant(default) == std::mem::discriminant(new),
    }
}

fn merge(base: &mut Value, layer: &Value, path: &str) -> Result<()> {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (b, l) => {
            let structural = b.is_object() || (l.is_object() && !b.is_null());
            if structural || !compatible(b, l) {
                return Err(Error::Config(format!("key {path:?} expects {}, got {}", kind(b), kind(l))));
            }
            *b = l.clone();
            Ok(())
        }
    }
}

fn nest(path: &[String], value: Value) -> Value {
    path.iter().rev().fold(value, |acc, k| {
        let mut m = Map::new();
        m.insert(k.clone(), acc);
        Value::Object(m)
    })
}

fn take_preset(layer: &mut Value) -> Result<Option<String>> {
    let Some(model) = layer.get_mut("model").and_then(Value::as_object_mut) else {
        return Ok(None);
    };
    match model.remove("preset") {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(Error::Config(format!("key \"model.preset\" expects a string, got {}", kind(&other)))),
    }
}

fn lookup<'a>(v: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(v, |acc, k| acc.get(k))
}

/// Resolves a config from an optional parsed file and ordered overrides.
pub fn resolve_config(file: Option<Value>, overrides: &[String]) -> Result<RunConfig> {
    let mut layers = Vec::new();
    if let Some(f) = file {
        if !f.is_object() {
            return Err(Error::Config(format!("config root must be an object, got {}", kind(&f))));
        }
        layers.push(f);
    }
    for spec in overrides {
        let (path, value) = parse_override(spec)?;
        layers.push(nest(&path, value));
    }
    let mut preset = None;
    for layer in &mut layers {
        if let Some(p) = take_preset(layer)? {
            preset = Some(p);
        }
    }
    let mut base = RunConfig::default();
    if let Some(name) = &preset {
        base.model = VitConfig::preset(name)?;
    }
    let mut merged = serde_json::to_value(&base)?;
    for layer in &layers {
        merge(&mut merged, layer, "")?;
    }
    let explicit_img = layers.iter().rev().find_map(|l| lookup(l, &["model", "img_size"]).cloned());
    let global = merged["pretrain"]["crops"]["global_size"].clone();
    if let Some(img) = explicit_img {
        if img != global {
            return Err(Error::Config(format!(
                "model.img_size {img} differs from pretrain.crops.global_size {global}"
            )));
        }
    }
    merged["model"]["img_size"] = global;
    let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses config text; `source_name` labels errors.
pub fn parse_config_str(text: &str, source_name: &str, overrides: &[String]) -> Result<RunConfig> {
    let file: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        source_name: source_name.to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    resolve_config(Some(file), overrides)
}

pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).at(p)?;
            parse_config_str(&text, &p.display().to_string(), overrides)
        }
        None => resolve_config(None, overrides),
    }
}
