//! Loading the series, explanations, predictions and models a service or
//! experiment runs on.

use std::path::{Path, PathBuf};

use anyhow::Context;
use xselector_core::explanations::ExplanationStore;
use xselector_core::market::{load_price_csv, PriceSeries};
use xselector_core::policy::PolicyParams;
use xselector_core::predictor::{load_predictions_csv, DailyPredictions};
use xselector_core::selector::SelectorConfig;
use xselector_core::sim::Environment;
use xselector_core::synth::World;
use xselector_core::user_model::UserModel;

use crate::config::ServiceConfig;

pub struct DataBundle {
    pub config: ServiceConfig,
    pub series: PriceSeries,
    pub store: ExplanationStore,
    pub predictions: DailyPredictions,
    pub user_model: Option<UserModel>,
    pub policy: Option<PolicyParams>,
}

impl DataBundle {
    pub fn load(config: ServiceConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let series = load_price_csv(&config.series).with_context(|| format!("loading {}", config.series.display()))?;
        let store = ExplanationStore::load_manifest(&config.manifest, config.feature_dim)
            .with_context(|| format!("loading {}", config.manifest.display()))?;
        let rows = load_predictions_csv(&config.predictions)
            .with_context(|| format!("loading {}", config.predictions.display()))?;
        let predictions = DailyPredictions::from_dated(&series, &rows)?;
        let user_model = config
            .user_model
            .as_ref()
            .map(|p| UserModel::load(p).with_context(|| format!("loading {}", p.display())))
            .transpose()?;
        let policy = config
            .policy
            .as_ref()
            .map(|p| PolicyParams::load(p).with_context(|| format!("loading {}", p.display())))
            .transpose()?;
        let bundle = DataBundle {
            config,
            series,
            store,
            predictions,
            user_model,
            policy,
        };
        bundle.check()?;
        Ok(bundle)
    }

    fn check(&self) -> anyhow::Result<()> {
        let env = self.environment();
        for (id, &start) in &self.config.scenarios {
            env.check_window(&(start..start + self.config.scenario_days))
                .with_context(|| format!("scenario `{id}`"))?;
        }
        if let Some(m) = &self.user_model {
            anyhow::ensure!(
                m.config.num_days >= self.series.len() && m.config.feature_dim == self.store.feature_dim(),
                "user model was trained for {} days of {}-dim features; data has {} days of {}-dim features",
                m.config.num_days,
                m.config.feature_dim,
                self.series.len(),
                self.store.feature_dim()
            );
        }
        Ok(())
    }

    pub fn environment(&self) -> Environment<'_> {
        Environment {
            series: &self.series,
            predictions: &self.predictions,
            store: &self.store,
            user_model: self.user_model.as_ref(),
            policy: self.policy.as_ref(),
            selector: self.config.selector,
        }
    }
}

/// Writes a generated world, and optionally a trained user model, under
/// `out` together with a `service.toml` pointing at it. Returns the config
/// with absolute paths.
pub fn write_testbed(out: &Path, world: &World, user_model: Option<&UserModel>) -> anyhow::Result<ServiceConfig> {
    world.write(out)?;
    let user_model_path = match user_model {
        Some(m) => {
            m.save(out.join("user_model.json"))?;
            Some(PathBuf::from("user_model.json"))
        }
        None => None,
    };
    let config = ServiceConfig {
        series: PathBuf::from("series").join(format!("{}.csv", world.test_series.code())),
        manifest: PathBuf::from("explanations").join("manifest.json"),
        predictions: "predictions.csv".into(),
        user_model: user_model_path,
        policy: Some("policy.json".into()),
        log_dir: "sessions".into(),
        feature_dim: world.store.feature_dim(),
        scenario_days: world.config.scenario_days,
        chart_bars: world.config.scenario_days,
        scenarios: [
            ("high".to_string(), world.scenarios.high.start),
            ("low".to_string(), world.scenarios.low.start),
        ]
        .into(),
        selector: SelectorConfig::default(),
    };
    let path = out.join("service.toml");
    std::fs::write(&path, config.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
    ServiceConfig::load(&path)
}
