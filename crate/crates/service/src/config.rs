//! Service configuration: data and model paths, scenarios, selector options.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use xselector_core::explanations::DEFAULT_FEATURE_DIM;
use xselector_core::selector::SelectorConfig;
use xselector_core::sim::SCENARIO_DAYS;

pub const ENV_SERIES: &str = "XSELECTOR_SERIES";
pub const ENV_MANIFEST: &str = "XSELECTOR_MANIFEST";
pub const ENV_PREDICTIONS: &str = "XSELECTOR_PREDICTIONS";
pub const ENV_USER_MODEL: &str = "XSELECTOR_USER_MODEL";
pub const ENV_POLICY: &str = "XSELECTOR_POLICY";
pub const ENV_LOG_DIR: &str = "XSELECTOR_LOG_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// OHLC CSV of the instrument traded in sessions.
    pub series: PathBuf,
    /// Explanation manifest (JSON).
    pub manifest: PathBuf,
    /// `date,p_bull,p_neutral,p_bear` CSV.
    pub predictions: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    /// Per-session event logs.
    pub log_dir: PathBuf,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_days")]
    pub scenario_days: usize,
    /// Trailing bars included in each day view.
    #[serde(default = "default_days")]
    pub chart_bars: usize,
    /// Scenario id to first day index in the series.
    pub scenarios: BTreeMap<String, usize>,
    #[serde(default)]
    pub selector: SelectorConfig,
}

fn default_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

fn default_days() -> usize {
    SCENARIO_DAYS
}

impl ServiceConfig {
    /// Reads a TOML file. Relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ServiceConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.series);
        fix(&mut self.manifest);
        fix(&mut self.predictions);
        fix(&mut self.log_dir);
        if let Some(p) = self.user_model.as_mut() {
            fix(p);
        }
        if let Some(p) = self.policy.as_mut() {
            fix(p);
        }
    }

    /// Replaces paths with values found by `lookup` (normally the process
    /// environment).
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(v) = lookup(ENV_SERIES) {
            self.series = v.into();
        }
        if let Some(v) = lookup(ENV_MANIFEST) {
            self.manifest = v.into();
        }
        if let Some(v) = lookup(ENV_PREDICTIONS) {
            self.predictions = v.into();
        }
        if let Some(v) = lookup(ENV_USER_MODEL) {
            self.user_model = Some(v.into());
        }
        if let Some(v) = lookup(ENV_POLICY) {
            self.policy = Some(v.into());
        }
        if let Some(v) = lookup(ENV_LOG_DIR) {
            self.log_dir = v.into();
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.scenarios.is_empty() {
            bail!("config lists no scenarios");
        }
        if self.scenario_days == 0 || self.feature_dim == 0 {
            bail!("scenario_days and feature_dim must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
