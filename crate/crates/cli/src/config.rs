//! Run configuration: a TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use eqhand::data::SplitSpec;
use eqhand::{SyntheticHandConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataPaths,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Training pool; every record must be labeled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    /// Held-out set for per-epoch test error.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub n: usize,
    pub seed: u64,
    pub synthetic: SyntheticHandConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { n: 2000, seed: 0, synthetic: SyntheticHandConfig::default() }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig =
            RunConfig::deserialize(toml::Value::Table(tree)).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.train.validate().map_err(|e| CliError::Usage(format!("train: {e}")))?;
        cfg.split.validate().map_err(|e| CliError::Usage(format!("split: {e}")))?;
        cfg.generate.synthetic.validate().map_err(|e| CliError::Usage(format!("generate.synthetic: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("cannot serialise config: {e}")))
    }

    /// Writes the fully resolved config next to a run's outputs.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad key path `{key}`")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| CliError::Usage(format!("`{key}`: `{p}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
