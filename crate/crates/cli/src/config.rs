//! Pipeline configuration: a TOML file, then `--set key.path=value`
//! overrides, then defaults for anything left unset.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nneb_core::data::{load_csv, split, synth_prices, PriceSeries, SynthSpec};
use nneb_core::ess::EssParams;
use nneb_core::ppo::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data: DataConfig,
    pub ess: EssParams,
    pub train: TrainConfig,
    pub retrain: RetrainConfig,
    pub extract: ExtractConfig,
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Price CSV (`timestamp,lmp`). Synthetic prices are used when unset.
    pub csv: Option<PathBuf>,
    pub synthetic_seed: u64,
    pub synthetic_days: usize,
    pub synthetic: SynthSpec,
    pub train_days: usize,
    pub test_days: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: None,
            synthetic_seed: 42,
            synthetic_days: 60,
            synthetic: SynthSpec::default(),
            train_days: 30,
            test_days: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    /// Cleared powers collected from the first-stage policy for clustering.
    pub action_samples: usize,
    pub levels: usize,
    /// Overrides `train.total_steps` for the second stage.
    pub total_steps: Option<u64>,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            action_samples: 20_000,
            levels: nneb_core::quantizer::DEFAULT_LEVELS,
            total_steps: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub grid_points: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            grid_points: nneb_core::extraction::EXTRACTION_GRID_POINTS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub soc_nodes: usize,
    pub power_levels: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            soc_nodes: 401,
            power_levels: 21,
        }
    }
}

/// Which part of the chronological split a command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Window {
    Train,
    Test,
}

impl AppConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: AppConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let key = e.path().to_string();
            anyhow!("config key `{key}`: {}", e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.ess.validate().context("config section `ess`")?;
        self.train.validate().context("config section `train`")?;
        if self.data.train_days == 0 || self.data.test_days == 0 {
            bail!("config keys `data.train_days` and `data.test_days` must be positive");
        }
        if self.retrain.levels == 0 || self.retrain.action_samples < self.retrain.levels {
            bail!("config key `retrain.action_samples` must be at least `retrain.levels` (> 0)");
        }
        if self.extract.grid_points < 2 {
            bail!("config key `extract.grid_points` must be at least 2");
        }
        Ok(())
    }

    /// Resolved configuration as recorded in every output file.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }

    pub fn series(&self) -> Result<PriceSeries> {
        match &self.data.csv {
            Some(path) => {
                let (series, gaps) = load_csv(path)
                    .with_context(|| format!("data.csv = {}: cannot load the price series", path.display()))?;
                if gaps.filled() > 0 {
                    log::warn!(
                        "filled {} missing intervals over {} gaps by linear interpolation",
                        gaps.filled(),
                        gaps.gaps.len()
                    );
                }
                Ok(series)
            }
            None => Ok(synth_prices(
                self.data.synthetic_seed,
                self.data.synthetic_days,
                &self.data.synthetic,
            )),
        }
    }

    pub fn split(&self) -> Result<(PriceSeries, PriceSeries)> {
        let series = self.series()?;
        split(&series, self.data.train_days, self.data.test_days)
            .context("splitting prices by `data.train_days` and `data.test_days`")
    }
}

/// `a.b.c=value`, where the value is read as a TOML literal and falls back
/// to a bare string.
fn apply_override(table: &mut toml::Table, arg: &str) -> Result<()> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{arg}` is not of the form key.path=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override `{arg}` has an empty key segment");
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => match t.remove("v").expect("parsed key") {
            toml::Value::Datetime(d) => toml::Value::String(d.to_string()),
            v => v,
        },
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{arg}`: `{}` is not a table", path[..=depth].join(".")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
