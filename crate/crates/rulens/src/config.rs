//! Run configuration: one TOML document, layered as
//! preset → config file → `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rulens_core::cmapss::PreprocessConfig;
use rulens_core::metrics::{EvalConfig, ScoreConvention};
use rulens_core::nn::{Architecture, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UserError;

pub const PAPER_PRESET: &str = include_str!("../../../configs/paper.toml");
pub const DESK_PRESET: &str = include_str!("../../../configs/desk.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Free-form label echoed into outputs.
    pub label: String,
    pub data: DataPaths,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub evaluation: EvaluationConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            label: "paper".to_string(),
            data: DataPaths::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            evaluation: EvaluationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub rul: Option<PathBuf>,
}

/// Layer widths; the input width comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub recurrent_layers: Vec<usize>,
    /// Hidden `tanh` layers followed by the 2-unit head; must end in 2.
    pub dense_layers: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::lstm_32_16(1);
        Self {
            recurrent_layers: a.recurrent_layers,
            dense_layers: a.dense_layers,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, input_dim: usize) -> Result<Architecture> {
        Architecture::new(input_dim, self.recurrent_layers.clone(), self.dense_layers.clone())
            .map_err(|e| UserError::new(format!("model: {e}")).into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub base_seed: u64,
    /// Members trained at once; 0 uses every available core.
    pub threads: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 15,
            base_seed: 237,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub alpha: f64,
    pub score_convention: ScoreConvention,
    /// Score the last cycle of each test unit only.
    pub last_step_only: bool,
    /// Profile uncertainty over every sliding window instead of the last
    /// cycle of each unit.
    pub per_window: bool,
    pub kde_grid: usize,
    /// Published numbers printed next to ours; never used in computation.
    pub reference: Option<ReferenceRow>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let m = EvalConfig::default();
        Self {
            alpha: m.alpha,
            score_convention: m.score_convention,
            last_step_only: m.last_step_only,
            per_window: false,
            kde_grid: rulens_core::metrics::DEFAULT_KDE_GRID,
            reference: None,
        }
    }
}

impl EvaluationConfig {
    pub fn metrics(&self) -> EvalConfig {
        EvalConfig {
            alpha: self.alpha,
            score_convention: self.score_convention,
            last_step_only: self.last_step_only,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRow {
    pub label: String,
    pub rmse: Option<f64>,
    pub score: Option<f64>,
    pub picp: Option<f64>,
    pub nmpiw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn source(self) -> &'static str {
        match self {
            Preset::Paper => PAPER_PRESET,
            Preset::Desk => DESK_PRESET,
        }
    }
}

impl RunConfig {
    /// Preset, then the optional file, then `key.path=value` overrides.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(preset.source()).context("built-in preset")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UserError::new(format!("cannot read config {}: {e}", path.display())))?;
            let file_doc: toml::Table = toml::from_str(&text)
                .map_err(|e| UserError::new(format!("config {}: {e}", path.display())))?;
            merge(&mut doc, file_doc);
        }
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        let config: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| UserError::new(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let user = |e: rulens_core::Error| anyhow::Error::from(UserError::new(e.to_string()));
        self.training.validate().map_err(user)?;
        self.model.architecture(1)?;
        if self.ensemble.members == 0 {
            bail!(UserError::new("ensemble.members must be at least 1"));
        }
        if self.preprocess.window_length == 0 || self.preprocess.stride == 0 {
            bail!(UserError::new("preprocess.window_length and stride must be positive"));
        }
        let alpha = self.evaluation.alpha;
        if !(alpha > 0.0 && alpha < 1.0) {
            bail!(UserError::new(format!("evaluation.alpha {alpha} is outside (0, 1)")));
        }
        if self.evaluation.kde_grid < 2 {
            bail!(UserError::new("evaluation.kde_grid must be at least 2"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn member_seeds(&self) -> Vec<u64> {
        (0..self.ensemble.members)
            .map(|k| rulens_core::ensemble::member_seed(self.ensemble.base_seed, k))
            .collect()
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| UserError::new(format!("override `{item}` is not KEY=VALUE")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!(UserError::new(format!("bad override key `{path}`")));
    }
    let value = parse_literal(raw.trim());
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!(UserError::new(format!("`{key}` in `{path}` is not a table"))))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
