//! Run configuration: TOML file with `[scenes]`, `[model]`, `[train]` and
//! `[eval]` sections plus command-line `--key value` overrides.

use anyhow::{anyhow, bail, Context, Result};
use dhq::detector::{ModelConfig, TrainConfig};
use dhq::eval::EvalSettings;
use dhq::scenes::SceneGenParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use toml::{Table, Value};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DHQ_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenesConfig {
    /// Scenes generated when no dataset file is given.
    pub n_scenes: usize,
    /// Fraction of scenes in the training split.
    pub train_fraction: f64,
    #[serde(flatten)]
    pub params: SceneGenParams,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            n_scenes: 300,
            train_fraction: 2.0 / 3.0,
            params: SceneGenParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    pub scenes: ScenesConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out_dir = std::env::var_os(OUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from);
        Self {
            out_dir,
            threads: 0,
            scenes: ScenesConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = text.parse()?;
        check_known(&table, &default_table(), "")?;
        let cfg: RunConfig = Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenes.params.validate()?;
        if !(self.scenes.train_fraction > 0.0 && self.scenes.train_fraction < 1.0) {
            bail!("scenes.train_fraction must lie in (0, 1)");
        }
        self.model.validate()?;
        if self.model.grid != self.scenes.params.grid {
            bail!(
                "model.grid {} differs from scenes.grid {}",
                self.model.grid,
                self.scenes.params.grid
            );
        }
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be >= 1");
        }
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh < 1.0)
            || self.eval.confidence_bins == 0
        {
            bail!("eval settings out of range");
        }
        Ok(())
    }

    /// Applies `(key, value)` overrides. A bare key sets every field of that
    /// name (top level or in any section); `section.key` sets one field.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = Table::try_from(self)?;
        for (key, raw) in overrides {
            let key = key.replace('-', "_");
            let targets = resolve(&table, &key)?;
            for (section, field) in targets {
                let slot = match &section {
                    Some(s) => table
                        .get_mut(s)
                        .and_then(Value::as_table_mut)
                        .and_then(|t| t.get_mut(&field)),
                    None => table.get_mut(&field),
                }
                .expect("resolved key exists");
                *slot = parse_like(slot, raw).with_context(|| format!("override --{key} {raw}"))?;
            }
        }
        let cfg: RunConfig = Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_table() -> Table {
    Table::try_from(RunConfig::default()).expect("default config serializes")
}

/// Every key accepted as an override, bare and dotted.
pub fn config_keys() -> Vec<String> {
    let mut keys = Vec::new();
    for (k, v) in default_table() {
        match v {
            Value::Table(t) => {
                for f in t.keys() {
                    keys.push(f.clone());
                    keys.push(format!("{k}.{f}"));
                }
            }
            _ => keys.push(k),
        }
    }
    keys.sort();
    keys.dedup();
    keys
}

fn resolve(table: &Table, key: &str) -> Result<Vec<(Option<String>, String)>> {
    if let Some((section, field)) = key.split_once('.') {
        let found = table
            .get(section)
            .and_then(Value::as_table)
            .is_some_and(|t| t.contains_key(field));
        if !found {
            bail!("unknown config key {key}");
        }
        return Ok(vec![(Some(section.to_string()), field.to_string())]);
    }
    let mut out = Vec::new();
    for (name, v) in table {
        match v {
            Value::Table(t) if t.contains_key(key) => {
                out.push((Some(name.clone()), key.to_string()))
            }
            Value::Table(_) => {}
            _ if name == key => out.push((None, key.to_string())),
            _ => {}
        }
    }
    if out.is_empty() {
        bail!("unknown config key {key}");
    }
    Ok(out)
}

fn parse_like(current: &Value, raw: &str) -> Result<Value> {
    Ok(match current {
        Value::Integer(_) => Value::Integer(raw.parse()?),
        Value::Float(_) => Value::Float(raw.parse()?),
        Value::Boolean(_) => Value::Boolean(match raw {
            "true" | "on" | "1" => true,
            "false" | "off" | "0" => false,
            _ => bail!("expected a boolean, got {raw:?}"),
        }),
        Value::String(_) => Value::String(raw.to_string()),
        other => bail!("cannot override a {} value", other.type_str()),
    })
}

fn check_known(table: &Table, reference: &Table, prefix: &str) -> Result<()> {
    for (k, v) in table {
        let full = format!("{prefix}{k}");
        let known = reference
            .get(k)
            .ok_or_else(|| anyhow!("unknown config key {full}"))?;
        if let (Value::Table(t), Value::Table(r)) = (v, known) {
            check_known(t, r, &format!("{full}."))?;
        }
    }
    Ok(())
}
