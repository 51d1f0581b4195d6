//! A self-contained synthetic market: price series with persistent drift,
//! a predictor trained on them, per-day explanation candidates rendered as
//! PNGs and sentences, and the trained policy.

use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explanations::{ExplanationStore, ManifestEntry, Modality, DEFAULT_FEATURE_DIM};
use crate::market::{write_price_csv, OhlcBar, PriceClass, PriceSeries, LABEL_HORIZON};
use crate::policy::{train_policy_on, PolicyHyperparams, PolicyParams, TrainingSource};
use crate::predictor::{
    labeled_days, select_scenarios, train_predictor, write_predictions_csv, DailyPredictions, PredictorHyperparams,
    PredictorParams, ScenarioSelection, DEFAULT_SCENARIO_WINDOW, DEFAULT_WINDOW,
};
use crate::sim::{generate_training_logs, mix_seed, Environment, UserPopulation};
use crate::selector::SelectorConfig;
use crate::user_model::{train_user_model, InteractionRecord, TrainConfig, UserModel, UserModelConfig};

/// Log-price process: `r_t = mu_t + eps_t`, `mu_t = phi mu_{t-1} - kappa x_{t-1} + eta_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceProcess {
    pub start_price: f64,
    pub drift_persistence: f64,
    pub drift_sigma: f64,
    pub return_sigma: f64,
    pub gap_sigma: f64,
    pub mean_reversion: f64,
    pub base_volume: f64,
}

impl Default for PriceProcess {
    fn default() -> Self {
        PriceProcess {
            start_price: 2000.0,
            drift_persistence: 0.97,
            drift_sigma: 0.0015,
            return_sigma: 0.012,
            gap_sigma: 0.003,
            mean_reversion: 0.002,
            base_volume: 1.0e6,
        }
    }
}

fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

pub fn first_trading_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 5, 18).expect("valid date")
}

pub fn generate_series(code: &str, bars: usize, process: &PriceProcess, seed: u64) -> Result<PriceSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()));
    let eta = std(process.drift_sigma)?;
    let eps = std(process.return_sigma)?;
    let gap = std(process.gap_sigma)?;
    let wick = std(0.004)?;
    let vol = std(0.3)?;
    let base = process.start_price.ln();
    let mut mu = 0.0;
    let mut log_close = base;
    let mut out = Vec::with_capacity(bars);
    for date in business_days(first_trading_date(), bars) {
        mu = process.drift_persistence * mu - process.mean_reversion * (log_close - base) + eta.sample(&mut rng);
        let open = (log_close + gap.sample(&mut rng)).exp();
        let r = mu + eps.sample(&mut rng);
        log_close += r;
        let close = log_close.exp();
        let high = open.max(close) * f64::exp(wick.sample(&mut rng).abs());
        let low = open.min(close) * f64::exp(-wick.sample(&mut rng).abs());
        let volume = (process.base_volume * f64::exp(vol.sample(&mut rng) + 5.0 * r.abs())).round();
        out.push(OhlcBar {
            date,
            open,
            high,
            low,
            close,
            volume,
        });
    }
    PriceSeries::new(code, out)
}

pub const TEXT_TEMPLATES: [[&str; 2]; 3] = [
    [
        "Closes have been climbing for several sessions and momentum points higher",
        "Volume expands on up days which supports a continued advance",
    ],
    [
        "Price is drifting sideways inside a narrow band",
        "Short and long moving averages are flat with no clear direction",
    ],
    [
        "Lower highs suggest sellers remain in control",
        "The price slipped below its average as selling pressure grew",
    ],
];

pub const SALIENCY_SIZE: u32 = 32;

/// Heat map with a Gaussian blob whose centre depends on the class and
/// shifts a little from day to day.
pub fn render_saliency(class: PriceClass, day: usize, seed: u64) -> image::RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, day as u64, class.index() as u64]));
    let (cx, cy) = match class {
        PriceClass::Bull => (24.0, 8.0),
        PriceClass::Neutral => (16.0, 16.0),
        PriceClass::Bear => (24.0, 24.0),
    };
    let cx = cx + rng.random_range(-3.0..3.0);
    let cy = cy + rng.random_range(-3.0..3.0);
    let sigma = rng.random_range(3.5..5.5);
    image::RgbImage::from_fn(SALIENCY_SIZE, SALIENCY_SIZE, |x, y| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        let v = (-d2 / (2.0 * sigma * sigma)).exp();
        image::Rgb([
            (255.0 * v) as u8,
            (255.0 * v * v * 0.6) as u8,
            (255.0 * (1.0 - v) * 0.4) as u8,
        ])
    })
}

/// Writes three saliency PNGs and six sentences per day in `days`, plus
/// `manifest.json`, under `dir`; returns the loaded store.
pub fn write_explanations(dir: &Path, days: Range<usize>, seed: u64, dim: usize) -> Result<ExplanationStore> {
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(format!("creating {}", img_dir.display()), e))?;
    let mut entries = Vec::new();
    for day in days {
        for class in PriceClass::ALL {
            let name = format!("d{day:04}_{}.png", class.to_string().to_lowercase());
            render_saliency(class, day, seed).save(img_dir.join(&name))?;
            entries.push(ManifestEntry {
                id: format!("d{day:04}-sal-{}", class.to_string().to_lowercase()),
                day,
                class,
                modality: Modality::Saliency,
                payload_path: Some(PathBuf::from("img").join(name)),
                text: None,
                feature: None,
            });
            for (j, sentence) in TEXT_TEMPLATES[class.index()].iter().enumerate() {
                entries.push(ManifestEntry {
                    id: format!("d{day:04}-txt-{}-{j}", class.to_string().to_lowercase()),
                    day,
                    class,
                    modality: Modality::Text,
                    payload_path: None,
                    text: Some(sentence.to_string()),
                    feature: None,
                });
            }
        }
    }
    let manifest = dir.join("manifest.json");
    let bytes = serde_json::to_vec_pretty(&entries)?;
    std::fs::write(&manifest, bytes).map_err(|e| Error::io(format!("writing {}", manifest.display()), e))?;
    ExplanationStore::load_manifest(&manifest, dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub train_instruments: usize,
    pub bars: usize,
    pub process: PriceProcess,
    pub window: usize,
    pub scenario_days: usize,
    pub feature_dim: usize,
    pub predictor: PredictorHyperparams,
    pub policy: PolicyHyperparams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 2024,
            train_instruments: 4,
            bars: 1200,
            process: PriceProcess::default(),
            window: DEFAULT_WINDOW,
            scenario_days: DEFAULT_SCENARIO_WINDOW,
            feature_dim: DEFAULT_FEATURE_DIM,
            predictor: PredictorHyperparams::default(),
            policy: PolicyHyperparams::default(),
        }
    }
}

/// Everything the experiments and the service need, in memory.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub train_series: Vec<PriceSeries>,
    pub test_series: PriceSeries,
    pub predictor: PredictorParams,
    pub train_predictions: Vec<DailyPredictions>,
    pub test_predictions: DailyPredictions,
    pub scenarios: ScenarioSelection,
    pub store: ExplanationStore,
    pub policy: PolicyParams,
}

impl World {
    /// Generates prices, trains the predictor and policy, picks scenarios
    /// and writes explanation payloads under `dir`.
    pub fn build(dir: &Path, config: WorldConfig) -> Result<World> {
        let train_series = (0..config.train_instruments)
            .map(|i| generate_series(&format!("TRAIN{i}"), config.bars, &config.process, mix_seed(&[config.seed, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let test_series = generate_series("TEST", config.bars, &config.process, mix_seed(&[config.seed, 0x7E57]))?;

        let mut data = Vec::new();
        for s in &train_series {
            data.extend(
                labeled_days(s, config.window)?
                    .into_iter()
                    .map(|d| (d.features, d.label)),
            );
        }
        let predictor = train_predictor(&data, &config.predictor)?;
        let train_predictions = train_series
            .iter()
            .map(|s| DailyPredictions::from_model(&predictor, s))
            .collect::<Result<Vec<_>>>()?;
        let test_predictions = DailyPredictions::from_model(&predictor, &test_series)?;
        let scenarios = select_scenarios(&predictor, &test_series, config.scenario_days)?;

        let sources: Vec<TrainingSource<'_>> = train_series
            .iter()
            .zip(&train_predictions)
            .map(|(series, predictions)| TrainingSource { series, predictions })
            .collect();
        let policy = train_policy_on(&sources, &config.policy)?;

        let store = write_explanations(
            &dir.join("explanations"),
            config.window..test_series.len() - LABEL_HORIZON,
            config.seed,
            config.feature_dim,
        )?;
        Ok(World {
            config,
            train_series,
            test_series,
            predictor,
            train_predictions,
            test_predictions,
            scenarios,
            store,
            policy,
        })
    }

    pub fn scenario_window(&self, id: &str) -> Result<Range<usize>> {
        match id {
            "high" => Ok(self.scenarios.high.clone()),
            "low" => Ok(self.scenarios.low.clone()),
            other => Err(Error::Validation(format!("unknown scenario `{other}`"))),
        }
    }

    pub fn environment<'a>(&'a self, user_model: Option<&'a UserModel>) -> Environment<'a> {
        Environment {
            series: &self.test_series,
            predictions: &self.test_predictions,
            store: &self.store,
            user_model,
            policy: Some(&self.policy),
            selector: SelectorConfig::default(),
        }
    }

    /// RANDOM-strategy logs over both scenario windows.
    pub fn training_logs(&self, population: &UserPopulation, users_per_window: usize, seed: u64) -> Result<Vec<InteractionRecord>> {
        let windows = [self.scenarios.high.clone(), self.scenarios.low.clone()];
        generate_training_logs(&self.environment(None), &windows, population, users_per_window, seed)
    }

    pub fn user_model_config(&self) -> UserModelConfig {
        UserModelConfig::new(self.test_series.len(), self.store.feature_dim())
    }

    pub fn train_user_model(&self, records: &[InteractionRecord], train: &TrainConfig) -> Result<UserModel> {
        train_user_model(records, &self.store, self.user_model_config(), train)
    }

    /// Writes series CSVs, predictions, scenarios and model weights. The
    /// explanation payloads were written by [`World::build`].
    pub fn write(&self, dir: &Path) -> Result<()> {
        let series_dir = dir.join("series");
        std::fs::create_dir_all(&series_dir).map_err(|e| Error::io(format!("creating {}", series_dir.display()), e))?;
        for s in self.train_series.iter().chain(std::iter::once(&self.test_series)) {
            write_price_csv(s, series_dir.join(format!("{}.csv", s.code())))?;
        }
        write_predictions_csv(&self.test_predictions.to_dated(&self.test_series), dir.join("predictions.csv"))?;
        self.predictor.save(dir.join("predictor.json"))?;
        self.policy.save(dir.join("policy.json"))?;
        let scenarios = dir.join("scenarios.json");
        std::fs::write(&scenarios, serde_json::to_vec_pretty(&self.scenarios)?)
            .map_err(|e| Error::io(format!("writing {}", scenarios.display()), e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explanations::featurize_saliency;

    #[test]
    fn series_is_valid_and_seeded() {
        let a = generate_series("A", 300, &PriceProcess::default(), 5).unwrap();
        let b = generate_series("A", 300, &PriceProcess::default(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 300);
        assert_eq!(a.bars()[0].date, first_trading_date());
        assert!(a.bars().iter().all(|b| b.date.weekday().number_from_monday() <= 5));
    }

    #[test]
    fn saliency_classes_are_distinguishable() {
        let f = |c, d| featurize_saliency(&image::DynamicImage::ImageRgb8(render_saliency(c, d, 1)), 256).unwrap();
        let cos = |a: &[f64], b: &[f64]| crate::nn::dot(a, b);
        let same = cos(&f(PriceClass::Bull, 1), &f(PriceClass::Bull, 2));
        let diff = cos(&f(PriceClass::Bull, 1), &f(PriceClass::Bear, 1));
        assert!(same > diff);
    }

    #[test]
    fn explanations_round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let store = write_explanations(dir.path(), 3..5, 1, 64).unwrap();
        assert_eq!(store.days().len(), 2);
        let day = store.get(3).unwrap();
        assert_eq!(day.len(), 9);
        assert_eq!(day.items()[0].class, PriceClass::Bull);
        assert_eq!(day.items()[0].modality, Modality::Saliency);
        assert!(store.resolve_payload(&day.items()[0]).unwrap().is_file());
    }
}
