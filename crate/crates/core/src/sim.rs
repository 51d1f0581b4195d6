//! Synthetic participants and the day loop that runs them through a
//! 60-day trading scenario under a given presentation strategy.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explanations::{DayCandidates, ExplanationCombination, ExplanationStore, Modality};
use crate::market::{apply_order, final_liquidation, total_assets, Account, Order, PriceSeries, INITIAL_CASH, LABEL_HORIZON};
use crate::policy::{policy_action, PolicyParams};
use crate::predictor::{DailyPredictions, PredictionDistribution};
use crate::selector::{strategy_select, SelectorConfig, SelectorModels, StrategyKind};
use crate::stats;
use crate::user_model::{write_jsonl, DecisionContext, InteractionRecord, UserModel};

pub const SCENARIO_DAYS: usize = 60;

/// splitmix64 over a few words; used to derive independent per-day streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const PHASE_INITIAL: u64 = 1;
const PHASE_FINAL: u64 = 2;
const PHASE_STRATEGY: u64 = 3;

/// A rule-following stand-in for a participant.
///
/// The initial order follows recent momentum (against it when
/// `contrarian`). The final order adds one push per flagged BULL item and
/// one pull per BEAR item, weighted per modality, plus a term for the
/// visible prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    /// Lots per percent of log return over `lookback` days.
    pub momentum_sensitivity: f64,
    pub saliency_susceptibility: f64,
    pub text_susceptibility: f64,
    /// Lots per unit of `p_bull - p_bear` when `p` is shown.
    pub prediction_weight: f64,
    pub noise_sigma: f64,
    pub contrarian: bool,
    pub lookback: usize,
    pub seed: u64,
}

impl SyntheticUser {
    pub fn passive(seed: u64) -> Self {
        SyntheticUser {
            momentum_sensitivity: 0.0,
            saliency_susceptibility: 0.0,
            text_susceptibility: 0.0,
            prediction_weight: 0.0,
            noise_sigma: 0.0,
            contrarian: false,
            lookback: 5,
            seed,
        }
    }

    fn noise(&self, day: usize, phase: u64) -> f64 {
        if self.noise_sigma <= 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, day as u64, phase]));
        Normal::new(0.0, self.noise_sigma)
            .expect("finite sigma")
            .sample(&mut rng)
    }

    /// Percent log return from the close `lookback` days back to today's open.
    pub fn momentum_score(&self, series: &PriceSeries, day: usize) -> Result<f64> {
        if day < self.lookback || self.lookback == 0 {
            return Err(Error::Range(format!(
                "day {day} lacks {} days of history",
                self.lookback
            )));
        }
        let past = series.bar(day - self.lookback)?.close;
        Ok(100.0 * (series.open(day)? / past).ln())
    }

    pub fn initial_order(&self, series: &PriceSeries, day: usize, account: &Account) -> Result<i64> {
        let price = series.open(day)?;
        let sign = if self.contrarian { -1.0 } else { 1.0 };
        let raw = sign * self.momentum_sensitivity * self.momentum_score(series, day)? + self.noise(day, PHASE_INITIAL);
        Ok(account.clamp_order(raw.round() as i64, price).lots())
    }

    /// Shift from `d'` before rounding and clipping.
    pub fn explanation_push(&self, candidates: &DayCandidates, shown: &ExplanationCombination, p: Option<&PredictionDistribution>) -> f64 {
        let mut push = 0.0;
        for k in shown.flagged() {
            let item = &candidates.items()[k];
            let w = match item.modality {
                Modality::Saliency => self.saliency_susceptibility,
                Modality::Text => self.text_susceptibility,
            };
            push += w * item.class.sign() as f64;
        }
        if let Some(p) = p {
            push += self.prediction_weight * p.expected_value();
        }
        push
    }

    pub fn final_order(
        &self,
        ctx: &DecisionContext,
        candidates: &DayCandidates,
        shown: &ExplanationCombination,
        p_visible: bool,
        account: &Account,
        price: f64,
    ) -> i64 {
        let push = self.explanation_push(candidates, shown, p_visible.then_some(&ctx.p));
        let delta = (push + self.noise(ctx.day, PHASE_FINAL)).round() as i64;
        account.clamp_order(ctx.initial_order + delta, price).lots()
    }
}

/// How the final order is produced.
#[derive(Clone, Copy)]
pub enum FinalBehavior<'a> {
    Rule,
    /// Follows the user model exactly: `d = clip(floor(d' + delta + 1/2))`.
    Oracle(&'a UserModel),
}

#[derive(Clone, Copy)]
pub struct Participant<'a> {
    pub user: SyntheticUser,
    pub behavior: FinalBehavior<'a>,
}

impl Participant<'_> {
    pub fn rule(user: SyntheticUser) -> Self {
        Participant {
            user,
            behavior: FinalBehavior::Rule,
        }
    }

    fn final_order(
        &self,
        ctx: &DecisionContext,
        candidates: &DayCandidates,
        shown: &ExplanationCombination,
        p_visible: bool,
        account: &Account,
        price: f64,
    ) -> Result<i64> {
        match self.behavior {
            FinalBehavior::Rule => Ok(self.user.final_order(ctx, candidates, shown, p_visible, account, price)),
            FinalBehavior::Oracle(model) => {
                let delta = model.predict_decision(ctx, candidates, shown)?.predicted_delta;
                let d = (ctx.initial_order as f64 + delta + 0.5).floor();
                let (lo, hi) = account.feasible_range(price);
                Ok((d.clamp(lo as f64, hi as f64)) as i64)
            }
        }
    }
}

/// Everything an episode reads.
#[derive(Clone, Copy)]
pub struct Environment<'a> {
    pub series: &'a PriceSeries,
    pub predictions: &'a DailyPredictions,
    pub store: &'a ExplanationStore,
    pub user_model: Option<&'a UserModel>,
    pub policy: Option<&'a PolicyParams>,
    pub selector: SelectorConfig,
}

impl Environment<'_> {
    pub fn models(&self) -> Option<SelectorModels<'_>> {
        Some(SelectorModels {
            user_model: self.user_model?,
            policy: self.policy?,
            config: &self.selector,
        })
    }

    pub fn check_window(&self, window: &Range<usize>) -> Result<()> {
        if window.is_empty() || window.end + LABEL_HORIZON > self.series.len() {
            return Err(Error::Range(format!(
                "window {window:?} needs a {LABEL_HORIZON}-day tail within {} bars",
                self.series.len()
            )));
        }
        for day in window.clone() {
            self.predictions.get(day)?;
            self.store.get(day)?;
        }
        Ok(())
    }

    pub fn context(&self, day: usize, account: &Account, initial_order: i64) -> Result<DecisionContext> {
        let price = self.series.open(day)?;
        Ok(DecisionContext {
            day,
            p: self.predictions.get(day)?,
            total_rate: total_assets(account, price) / INITIAL_CASH - 1.0,
            initial_order,
        })
    }

    pub fn d_ai(&self, ctx: &DecisionContext, account: &Account, price: f64) -> Option<i64> {
        self.policy.map(|p| policy_action(p, ctx, account, price).lots)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayLog {
    pub day: usize,
    pub initial_order: i64,
    pub final_order: i64,
    pub combination: ExplanationCombination,
    pub show_prediction: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ai: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub strategy: StrategyKind,
    pub session_id: String,
    /// Total assets at the start and after each day, valued at the close.
    pub assets: Vec<f64>,
    pub days: Vec<DayLog>,
    pub records: Vec<InteractionRecord>,
    pub final_value: f64,
}

fn timestamp(series: &PriceSeries, day: usize) -> Result<i64> {
    Ok(series
        .bar(day)?
        .date
        .and_hms_opt(9, 0, 0)
        .expect("valid time")
        .and_utc()
        .timestamp_millis())
}

/// Runs `participant` through `window` under `strategy`.
pub fn run_episode(
    env: &Environment<'_>,
    strategy: StrategyKind,
    window: Range<usize>,
    participant: &Participant<'_>,
    session_id: &str,
) -> Result<EpisodeResult> {
    env.check_window(&window)?;
    let mut account = Account::default();
    let mut assets = vec![INITIAL_CASH];
    let mut days = Vec::with_capacity(window.len());
    let mut records = Vec::with_capacity(window.len());
    for day in window.clone() {
        let price = env.series.open(day)?;
        let cands = env.store.get(day)?;
        let d_prime = participant.user.initial_order(env.series, day, &account)?;
        let ctx = env.context(day, &account, d_prime)?;
        let choice = strategy_select(
            strategy,
            &ctx,
            &account,
            price,
            cands,
            mix_seed(&[participant.user.seed, day as u64, PHASE_STRATEGY]),
            env.models(),
        )?;
        let d = participant.final_order(&ctx, cands, &choice.combination, choice.show_prediction, &account, price)?;
        let d_ai = choice
            .selection
            .as_ref()
            .map(|s| s.d_ai)
            .or_else(|| env.d_ai(&ctx, &account, price));
        account = apply_order(&account, Order(d), price)?;
        assets.push(total_assets(&account, env.series.bar(day)?.close));
        records.push(InteractionRecord {
            session_id: session_id.to_string(),
            timestamp: timestamp(env.series, day)?,
            context: ctx,
            combination: choice.combination,
            final_order: d,
        });
        days.push(DayLog {
            day,
            initial_order: d_prime,
            final_order: d,
            combination: choice.combination,
            show_prediction: choice.show_prediction,
            d_ai,
        });
    }
    let final_value = final_liquidation(&account, env.series, window.end - 1)?;
    Ok(EpisodeResult {
        strategy,
        session_id: session_id.to_string(),
        assets,
        days,
        records,
        final_value,
    })
}

/// Re-executes the logged final orders and returns the liquidated value.
pub fn replay_final_value(records: &[InteractionRecord], series: &PriceSeries) -> Result<f64> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptyDataset("no records to replay".into()))?;
    let mut account = Account::default();
    for (i, r) in records.iter().enumerate() {
        if r.context.day != first.context.day + i {
            return Err(Error::Validation(format!(
                "record {i} is for day {}, expected {}",
                r.context.day,
                first.context.day + i
            )));
        }
        account = apply_order(&account, Order(r.final_order), series.open(r.context.day)?)?;
    }
    final_liquidation(&account, series, first.context.day + records.len() - 1)
}

/// `|d - d_AI|` per day for every strategy, all evaluated from the same
/// state: the one reached by following XSELECTOR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceDay {
    pub day: usize,
    pub d_ai: i64,
    pub gaps: BTreeMap<StrategyKind, f64>,
}

/// Follows XSELECTOR with an oracle participant; on each day every
/// strategy in `rivals` is shown to the same participant in the same state.
/// RANDOM gaps are averaged over `random_draws` seeds.
pub fn oracle_dominance(
    env: &Environment<'_>,
    window: Range<usize>,
    user: SyntheticUser,
    rivals: &[StrategyKind],
    random_draws: usize,
) -> Result<Vec<DominanceDay>> {
    env.check_window(&window)?;
    let model = env
        .user_model
        .ok_or_else(|| Error::Config("oracle dominance needs a user model".into()))?;
    let participant = Participant {
        user,
        behavior: FinalBehavior::Oracle(model),
    };
    let models = env
        .models()
        .ok_or_else(|| Error::Config("oracle dominance needs a policy".into()))?;
    let mut account = Account::default();
    let mut out = Vec::with_capacity(window.len());
    for day in window {
        let price = env.series.open(day)?;
        let cands = env.store.get(day)?;
        let d_prime = user.initial_order(env.series, day, &account)?;
        let ctx = env.context(day, &account, d_prime)?;
        let xs = strategy_select(StrategyKind::Xselector, &ctx, &account, price, cands, 0, Some(models))?;
        let d_ai = xs.selection.as_ref().expect("xselector selection").d_ai;
        let gap = |choice: &crate::selector::StrategyChoice| -> Result<f64> {
            let d = participant.final_order(&ctx, cands, &choice.combination, choice.show_prediction, &account, price)?;
            Ok((d - d_ai).abs() as f64)
        };
        let mut gaps = BTreeMap::new();
        gaps.insert(StrategyKind::Xselector, gap(&xs)?);
        for &kind in rivals {
            let draws = if kind == StrategyKind::Random { random_draws.max(1) } else { 1 };
            let mut total = 0.0;
            for r in 0..draws {
                let seed = mix_seed(&[user.seed, day as u64, PHASE_STRATEGY, r as u64]);
                let choice = strategy_select(kind, &ctx, &account, price, cands, seed, Some(models))?;
                total += gap(&choice)?;
            }
            gaps.insert(kind, total / draws as f64);
        }
        let d = participant.final_order(&ctx, cands, &xs.combination, true, &account, price)?;
        account = apply_order(&account, Order(d), price)?;
        out.push(DominanceDay { day, d_ai, gaps });
    }
    Ok(out)
}

/// Ranges synthetic users are drawn from, uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserPopulation {
    pub momentum_sensitivity: (f64, f64),
    pub saliency_susceptibility: (f64, f64),
    pub text_susceptibility: (f64, f64),
    pub prediction_weight: (f64, f64),
    pub noise_sigma: f64,
    pub contrarian_rate: f64,
    pub lookback: usize,
}

impl Default for UserPopulation {
    fn default() -> Self {
        UserPopulation {
            momentum_sensitivity: (0.5, 1.5),
            saliency_susceptibility: (1.0, 2.0),
            text_susceptibility: (1.0, 2.0),
            prediction_weight: (1.0, 3.0),
            noise_sigma: 0.5,
            contrarian_rate: 0.0,
            lookback: 2,
        }
    }
}

impl UserPopulation {
    pub fn sample(&self, seed: u64) -> SyntheticUser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let momentum_sensitivity = draw(self.momentum_sensitivity);
        let saliency_susceptibility = draw(self.saliency_susceptibility);
        let text_susceptibility = draw(self.text_susceptibility);
        let prediction_weight = draw(self.prediction_weight);
        SyntheticUser {
            momentum_sensitivity,
            saliency_susceptibility,
            text_susceptibility,
            prediction_weight,
            noise_sigma: self.noise_sigma,
            contrarian: rng.random_bool(self.contrarian_rate.clamp(0.0, 1.0)),
            lookback: self.lookback,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategies: Vec<StrategyKind>,
    pub users_per_condition: usize,
    pub scenarios: Vec<ScenarioSpec>,
    #[serde(default = "default_days")]
    pub days: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub population: UserPopulation,
}

fn default_days() -> usize {
    SCENARIO_DAYS
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.scenarios.is_empty() || self.users_per_condition == 0 || self.days == 0 {
            return Err(Error::Config(
                "experiment needs strategies, scenarios, users and days".into(),
            ));
        }
        let mut ids: Vec<&str> = self.scenarios.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.scenarios.len() {
            return Err(Error::Config("scenario ids must be unique".into()));
        }
        Ok(())
    }

    /// Participant `i` of `scenario`; the same under every strategy.
    pub fn user(&self, scenario: usize, i: usize) -> SyntheticUser {
        self.population
            .sample(mix_seed(&[self.master_seed, scenario as u64, i as u64]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTrajectory {
    pub strategy: StrategyKind,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    /// Liquidated value per user, in user order.
    pub final_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub scenario: String,
    pub trajectories: Vec<StrategyTrajectory>,
}

impl ExperimentSummary {
    pub fn trajectory(&self, strategy: StrategyKind) -> Option<&StrategyTrajectory> {
        self.trajectories.iter().find(|t| t.strategy == strategy)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "strategy", "mean_assets", "se"])?;
        for t in &self.trajectories {
            for (day, (m, s)) in t.mean.iter().zip(&t.se).enumerate() {
                w.write_record([day.to_string(), t.strategy.to_string(), m.to_string(), s.to_string()])?;
            }
        }
        w.flush()
            .map_err(|e| Error::io("writing experiment csv", e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub summaries: Vec<ExperimentSummary>,
    /// Episodes in (scenario, strategy, user) order.
    pub episodes: Vec<(String, EpisodeResult)>,
}

impl ExperimentOutput {
    /// One summary CSV per scenario and one JSONL log per scenario and
    /// strategy.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for s in &self.summaries {
            let path = dir.join(format!("summary_{}.csv", s.scenario));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
            s.write_csv(file)?;
        }
        let mut logs: BTreeMap<(String, StrategyKind), Vec<InteractionRecord>> = BTreeMap::new();
        for (scenario, ep) in &self.episodes {
            logs.entry((scenario.clone(), ep.strategy))
                .or_default()
                .extend(ep.records.iter().cloned());
        }
        for ((scenario, strategy), records) in logs {
            let path = dir.join(format!("log_{scenario}_{strategy}.jsonl"));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
            write_jsonl(&records, std::io::BufWriter::new(file))?;
        }
        Ok(())
    }
}

/// Runs every (scenario, strategy) condition with paired users. Pure in
/// `(env, config)`.
pub fn run_experiment(env: &Environment<'_>, config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let mut summaries = Vec::new();
    let mut episodes = Vec::new();
    for (si, scenario) in config.scenarios.iter().enumerate() {
        let window = scenario.start..scenario.start + config.days;
        env.check_window(&window)?;
        let mut trajectories = Vec::new();
        for &strategy in &config.strategies {
            let results = (0..config.users_per_condition)
                .into_par_iter()
                .map(|i| {
                    let user = config.user(si, i);
                    let id = format!("{}-{}-{i:03}", scenario.id, strategy);
                    run_episode(env, strategy, window.clone(), &Participant::rule(user), &id)
                })
                .collect::<Result<Vec<_>>>()?;
            let steps = results[0].assets.len();
            let mut mean = Vec::with_capacity(steps);
            let mut se = Vec::with_capacity(steps);
            for t in 0..steps {
                let xs: Vec<f64> = results.iter().map(|r| r.assets[t]).collect();
                mean.push(stats::mean(&xs));
                se.push(stats::standard_error(&xs));
            }
            trajectories.push(StrategyTrajectory {
                strategy,
                mean,
                se,
                final_values: results.iter().map(|r| r.final_value).collect(),
            });
            episodes.extend(results.into_iter().map(|r| (scenario.id.clone(), r)));
        }
        summaries.push(ExperimentSummary {
            scenario: scenario.id.clone(),
            trajectories,
        });
    }
    Ok(ExperimentOutput { summaries, episodes })
}

/// Interaction logs from the RANDOM strategy, the training data for the
/// user model. Sessions are named `log-<scenario>-<i>`.
pub fn generate_training_logs(
    env: &Environment<'_>,
    windows: &[Range<usize>],
    population: &UserPopulation,
    users_per_window: usize,
    seed: u64,
) -> Result<Vec<InteractionRecord>> {
    let jobs: Vec<(usize, usize)> = (0..windows.len())
        .flat_map(|w| (0..users_per_window).map(move |i| (w, i)))
        .collect();
    let episodes = jobs
        .par_iter()
        .map(|&(w, i)| {
            let user = population.sample(mix_seed(&[seed, w as u64, i as u64, 0x10C]));
            run_episode(
                env,
                StrategyKind::Random,
                windows[w].clone(),
                &Participant::rule(user),
                &format!("log-{w}-{i:03}"),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(episodes.into_iter().flat_map(|e| e.records).collect())
}
