//! Reward-trained order recommender.
//!
//! Each of five actions is a signed fraction of the current capacity
//! (affordable lots when buying, held lots when selling). Action values are
//! linear in a small state vector and fitted by iterating ridge regressions
//! on Bellman targets over simulated episodes from the training series.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{apply_order, final_liquidation, total_assets, Account, Order, PriceSeries, INITIAL_CASH, LABEL_HORIZON};
use crate::nn::{self, Matrix, ParamSet, WeightFile};
use crate::predictor::{DailyPredictions, PredictionDistribution};
use crate::user_model::DecisionContext;

pub const ACTION_FRACTIONS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
pub const STATE_FEATURES: usize = 9;
pub const DEFAULT_EPISODE_DAYS: usize = 60;

/// What the policy sees: `p`, the total rate and the share of assets held
/// in stock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub p: PredictionDistribution,
    pub total_rate: f64,
    pub holdings: f64,
}

impl PolicyState {
    pub fn new(p: PredictionDistribution, account: &Account, price: f64) -> Self {
        let assets = total_assets(account, price);
        PolicyState {
            p,
            total_rate: assets / INITIAL_CASH - 1.0,
            holdings: if assets > 0.0 {
                account.shares() as f64 * price / assets
            } else {
                0.0
            },
        }
    }

    pub fn from_context(ctx: &DecisionContext, account: &Account, price: f64) -> Self {
        PolicyState {
            total_rate: ctx.total_rate,
            ..PolicyState::new(ctx.p, account, price)
        }
    }

    pub fn features(&self) -> [f64; STATE_FEATURES] {
        let [b, n, e] = self.p.as_array();
        let h = self.holdings;
        [1.0, b, n, e, h, h * b, h * n, h * e, self.total_rate]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyAction {
    pub action: usize,
    pub fraction: f64,
    /// Signed lots after scaling by capacity; always feasible.
    pub lots: i64,
}

/// Lots for `fraction` of the current capacity.
pub fn realize_fraction(fraction: f64, account: &Account, price: f64) -> i64 {
    let capacity = if fraction >= 0.0 {
        account.affordable_lots(price)
    } else {
        account.held_lots()
    };
    (fraction * capacity as f64).round() as i64
}

/// Assets change from one day's valuation to the next.
pub fn daily_reward(previous_assets: f64, current_assets: f64) -> f64 {
    current_assets - previous_assets
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyHyperparams {
    pub discount: f64,
    /// Relaxation applied to each refit: `w <- (1 - lr) w + lr w_fit`.
    pub learning_rate: f64,
    pub ridge: f64,
    pub iterations: usize,
    pub episodes: usize,
    pub episode_days: usize,
    pub seed: u64,
}

impl Default for PolicyHyperparams {
    fn default() -> Self {
        PolicyHyperparams {
            discount: 0.9,
            learning_rate: 1.0,
            ridge: 1e-3,
            iterations: 40,
            episodes: 300,
            episode_days: DEFAULT_EPISODE_DAYS,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub discount: f64,
    pub learning_rate: f64,
    pub actions: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    /// One row of action-value weights per action.
    pub weights: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
struct PolicyWeights(Matrix);

impl ParamSet for PolicyWeights {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("q_weights", &self.0)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![("q_weights", &mut self.0)]
    }
}

const WEIGHT_KIND: &str = "policy";

impl PolicyParams {
    pub fn zeros(hp: &PolicyHyperparams) -> Self {
        PolicyParams {
            config: PolicyConfig {
                discount: hp.discount,
                learning_rate: hp.learning_rate,
                actions: ACTION_FRACTIONS,
            },
            weights: Matrix::zeros(ACTION_FRACTIONS.len(), STATE_FEATURES),
        }
    }

    pub fn scores(&self, state: &PolicyState) -> [f64; 5] {
        let x = state.features();
        let mut out = [0.0; 5];
        for (a, o) in out.iter_mut().enumerate() {
            *o = nn::dot(self.weights.row(a), &x);
        }
        out
    }

    pub fn greedy(&self, state: &PolicyState) -> usize {
        nn::argmax(&self.scores(state))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        WeightFile::from_params(WEIGHT_KIND, self.config, &PolicyWeights(self.weights.clone())).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: WeightFile<PolicyConfig> = WeightFile::load(path)?;
        if file.config.actions != ACTION_FRACTIONS {
            return Err(Error::Validation("policy file uses a different action set".into()));
        }
        let mut w = PolicyWeights(Matrix::zeros(ACTION_FRACTIONS.len(), STATE_FEATURES));
        file.fill_params(WEIGHT_KIND, &mut w)?;
        if !w.all_finite() {
            return Err(Error::Validation("policy weights are not finite".into()));
        }
        Ok(PolicyParams {
            config: file.config,
            weights: w.0,
        })
    }
}

pub fn policy_action_for_state(params: &PolicyParams, state: &PolicyState, account: &Account, price: f64) -> PolicyAction {
    let action = params.greedy(state);
    let fraction = ACTION_FRACTIONS[action];
    PolicyAction {
        action,
        fraction,
        lots: realize_fraction(fraction, account, price),
    }
}

/// Greedy recommendation `d_AI` for the day described by `ctx`.
pub fn policy_action(params: &PolicyParams, ctx: &DecisionContext, account: &Account, price: f64) -> PolicyAction {
    policy_action_for_state(params, &PolicyState::from_context(ctx, account, price), account, price)
}

/// Softmax of the action values at temperature `temperature`; zero gives the
/// one-hot greedy action.
pub fn policy_distribution_for_state(params: &PolicyParams, state: &PolicyState, temperature: f64) -> [f64; 5] {
    let scores = params.scores(state);
    let mut out = [0.0; 5];
    if temperature <= 0.0 {
        out[nn::argmax(&scores)] = 1.0;
        return out;
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    out.copy_from_slice(&nn::softmax(&scaled));
    out
}

pub fn policy_distribution(
    params: &PolicyParams,
    ctx: &DecisionContext,
    account: &Account,
    price: f64,
    temperature: f64,
) -> [f64; 5] {
    policy_distribution_for_state(params, &PolicyState::from_context(ctx, account, price), temperature)
}

/// A price series paired with the predictor output for each of its days.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSource<'a> {
    pub series: &'a PriceSeries,
    pub predictions: &'a DailyPredictions,
}

impl TrainingSource<'_> {
    /// Episode start days with predictions for every day and a full
    /// liquidation tail.
    pub fn episode_starts(&self, days: usize) -> Vec<usize> {
        let len = self.series.len();
        if len < days + LABEL_HORIZON {
            return Vec::new();
        }
        let has = |d: usize| self.predictions.get(d).is_ok();
        (0..=len - days - LABEL_HORIZON)
            .filter(|&s| (s..s + days).all(has))
            .collect()
    }
}

struct Transition {
    state: [f64; STATE_FEATURES],
    action: usize,
    reward: f64,
    next: Option<[f64; STATE_FEATURES]>,
}

/// Runs one episode from `start`, choosing an action index per day, and
/// returns the liquidated gain over the initial cash.
pub fn rollout<F>(source: TrainingSource<'_>, start: usize, days: usize, mut choose: F) -> Result<f64>
where
    F: FnMut(&PolicyState) -> usize,
{
    let mut gain = 0.0;
    simulate(source, start, days, |s, _| choose(s), |t| gain += t.reward)?;
    Ok(gain * INITIAL_CASH)
}

fn simulate<F, G>(source: TrainingSource<'_>, start: usize, days: usize, mut choose: F, mut emit: G) -> Result<()>
where
    F: FnMut(&PolicyState, usize) -> usize,
    G: FnMut(Transition),
{
    let series = source.series;
    if start + days + LABEL_HORIZON > series.len() {
        return Err(Error::Range(format!(
            "episode {start}..{} needs a {LABEL_HORIZON}-day tail within {} bars",
            start + days,
            series.len()
        )));
    }
    let mut account = Account::default();
    for t in start..start + days {
        let price = series.open(t)?;
        let state = PolicyState::new(source.predictions.get(t)?, &account, price);
        let before = total_assets(&account, price);
        let action = choose(&state, t);
        let lots = realize_fraction(ACTION_FRACTIONS[action], &account, price);
        account = apply_order(&account, Order(lots), price)?;
        let last = t + 1 == start + days;
        let (after, next) = if last {
            (final_liquidation(&account, series, t)?, None)
        } else {
            let next_price = series.open(t + 1)?;
            let next_state = PolicyState::new(source.predictions.get(t + 1)?, &account, next_price);
            (total_assets(&account, next_price), Some(next_state.features()))
        };
        emit(Transition {
            state: state.features(),
            action,
            reward: daily_reward(before, after) / INITIAL_CASH,
            next,
        });
    }
    Ok(())
}

fn ridge_fit(rows: &[&[f64; STATE_FEATURES]], targets: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let mut xtx = DMatrix::<f64>::identity(STATE_FEATURES, STATE_FEATURES) * lambda;
    let mut xty = DVector::<f64>::zeros(STATE_FEATURES);
    for (x, y) in rows.iter().zip(targets) {
        for i in 0..STATE_FEATURES {
            xty[i] += x[i] * y;
            for j in 0..STATE_FEATURES {
                xtx[(i, j)] += x[i] * x[j];
            }
        }
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Validation("ridge system is not positive definite".into()))?;
    Ok(chol.solve(&xty).iter().copied().collect())
}

pub fn train_policy(series: &PriceSeries, predictions: &DailyPredictions, hp: &PolicyHyperparams) -> Result<PolicyParams> {
    train_policy_on(&[TrainingSource { series, predictions }], hp)
}

/// Fitted action-value iteration over episodes of a uniformly random
/// behaviour policy drawn from `sources`.
pub fn train_policy_on(sources: &[TrainingSource<'_>], hp: &PolicyHyperparams) -> Result<PolicyParams> {
    if !(0.0..1.0).contains(&hp.discount) || !(hp.learning_rate > 0.0 && hp.learning_rate <= 1.0) {
        return Err(Error::Config("discount must be in [0, 1) and learning rate in (0, 1]".into()));
    }
    if hp.episodes == 0 || hp.episode_days == 0 {
        return Err(Error::Config("need at least one episode of one day".into()));
    }
    let starts: Vec<(usize, usize)> = sources
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.episode_starts(hp.episode_days).into_iter().map(move |d| (i, d)))
        .collect();
    if starts.is_empty() {
        return Err(Error::Range(format!(
            "training window too short for {}-day episodes",
            hp.episode_days
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut data = Vec::with_capacity(hp.episodes * hp.episode_days);
    for _ in 0..hp.episodes {
        let (i, start) = starts[rng.random_range(0..starts.len())];
        simulate(
            sources[i],
            start,
            hp.episode_days,
            |_, _| rng.random_range(0..ACTION_FRACTIONS.len()),
            |t| data.push(t),
        )?;
    }

    let mut params = PolicyParams::zeros(hp);
    let by_action: Vec<Vec<usize>> = (0..ACTION_FRACTIONS.len())
        .map(|a| (0..data.len()).filter(|&i| data[i].action == a).collect())
        .collect();
    for _ in 0..hp.iterations {
        let targets: Vec<f64> = data
            .iter()
            .map(|t| {
                let future = t.next.map_or(0.0, |x| {
                    (0..ACTION_FRACTIONS.len())
                        .map(|a| nn::dot(params.weights.row(a), &x))
                        .fold(f64::NEG_INFINITY, f64::max)
                });
                t.reward + hp.discount * future
            })
            .collect();
        let mut next = params.weights.clone();
        for (a, idx) in by_action.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let rows: Vec<&[f64; STATE_FEATURES]> = idx.iter().map(|&i| &data[i].state).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            let fit = ridge_fit(&rows, &ys, hp.ridge)?;
            for (w, f) in next.row_mut(a).iter_mut().zip(fit) {
                *w = (1.0 - hp.learning_rate) * *w + hp.learning_rate * f;
            }
        }
        params.weights = next;
    }
    if !params.weights.is_finite() {
        return Err(Error::Validation("policy training diverged".into()));
    }
    Ok(params)
}

/// Gain of the greedy policy on the episode starting at `start`.
pub fn greedy_rollout(params: &PolicyParams, source: TrainingSource<'_>, start: usize, days: usize) -> Result<f64> {
    rollout(source, start, days, |s| params.greedy(s))
}

/// Gain of a uniformly random policy seeded by `seed`.
pub fn random_rollout(source: TrainingSource<'_>, start: usize, days: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout(source, start, days, |_| rng.random_range(0..ACTION_FRACTIONS.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::OhlcBar;
    use chrono::NaiveDate;

    fn series(closes: &[f64]) -> PriceSeries {
        let d0 = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let bars = closes
            .iter()
            .enumerate()
            .map(|(i, &c)| OhlcBar {
                date: d0 + chrono::Days::new(i as u64),
                open: c,
                high: c * 1.01,
                low: c * 0.99,
                close: c,
                volume: 1000.0,
            })
            .collect();
        PriceSeries::new("T", bars).unwrap()
    }

    fn bull(len: usize) -> DailyPredictions {
        DailyPredictions::from_vec(vec![Some(PredictionDistribution::one_hot(crate::market::PriceClass::Bull)); len])
    }

    #[test]
    fn zero_capacity_realizes_nothing() {
        let broke = Account::new(0.0, 0, 100).unwrap();
        for f in ACTION_FRACTIONS {
            assert_eq!(realize_fraction(f, &broke, 2000.0), 0);
        }
    }

    #[test]
    fn full_buy_capacity_arithmetic() {
        assert_eq!(realize_fraction(1.0, &Account::default(), 2000.0), 15);
        let held = Account::new(0.0, 1000, 100).unwrap();
        assert_eq!(realize_fraction(-0.5, &held, 2000.0), -5);
    }

    #[test]
    fn reward_is_asset_difference() {
        assert_eq!(daily_reward(3_000_000.0, 3_010_000.0), 10_000.0);
    }

    #[test]
    fn greedy_is_deterministic_and_matches_distribution() {
        let mut params = PolicyParams::zeros(&PolicyHyperparams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        params.weights = Matrix::uniform(5, STATE_FEATURES, 1.0, &mut rng);
        for _ in 0..200 {
            let b: f64 = rng.random_range(0.0..1.0);
            let n: f64 = rng.random_range(0.0..1.0 - b);
            let state = PolicyState {
                p: PredictionDistribution::new(b, n, 1.0 - b - n).unwrap(),
                total_rate: rng.random_range(-0.2..0.2),
                holdings: rng.random_range(0.0..1.0),
            };
            let g = params.greedy(&state);
            assert_eq!(g, params.greedy(&state));
            for tau in [0.0, 0.1, 1.0, 10.0] {
                assert_eq!(nn::argmax(&policy_distribution_for_state(&params, &state, tau)), g);
            }
        }
    }

    #[test]
    fn distribution_limits() {
        let mut params = PolicyParams::zeros(&PolicyHyperparams::default());
        let state = PolicyState {
            p: PredictionDistribution::uniform(),
            total_rate: 0.0,
            holdings: 0.0,
        };
        assert_eq!(policy_distribution_for_state(&params, &state, 1.0), [0.2; 5]);
        // Bias column only: scores are (0, 1, 2, 3, 4).
        for a in 0..5 {
            params.weights.row_mut(a)[0] = a as f64;
        }
        let d = policy_distribution_for_state(&params, &state, 1.0);
        let z: f64 = (0..5).map(|a| (a as f64).exp()).sum();
        for a in 0..5 {
            assert!((d[a] - (a as f64).exp() / z).abs() < 1e-12);
        }
        assert_eq!(policy_distribution_for_state(&params, &state, 0.0), [0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn too_short_window_is_error() {
        let s = series(&[100.0; 40]);
        let err = train_policy(&s, &bull(40), &PolicyHyperparams::default()).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn monotone_bull_buys_everything() {
        let closes: Vec<f64> = (0..200).map(|i| 1000.0 * 1.003f64.powi(i)).collect();
        let s = series(&closes);
        let preds = bull(200);
        let hp = PolicyHyperparams {
            episodes: 100,
            ..Default::default()
        };
        let params = train_policy(&s, &preds, &hp).unwrap();
        let src = TrainingSource {
            series: &s,
            predictions: &preds,
        };
        let mut full = 0;
        let mut total = 0;
        let mut account = Account::default();
        for t in 0..60 {
            let price = s.open(t).unwrap();
            let state = PolicyState::new(preds.get(t).unwrap(), &account, price);
            let act = policy_action_for_state(&params, &state, &account, price);
            full += (act.lots == account.affordable_lots(price)) as usize;
            total += 1;
            account = apply_order(&account, Order(act.lots), price).unwrap();
        }
        assert!(full * 10 >= total * 9, "{full}/{total}");
        let g = greedy_rollout(&params, src, 10, 60).unwrap();
        let r = random_rollout(src, 10, 60, 1).unwrap();
        assert!(g > r);
    }

    #[test]
    fn weights_round_trip_and_training_is_deterministic() {
        let closes: Vec<f64> = (0..120).map(|i| 1000.0 + (i as f64 * 0.7).sin() * 30.0).collect();
        let s = series(&closes);
        let preds = bull(120);
        let hp = PolicyHyperparams {
            episodes: 20,
            iterations: 5,
            ..Default::default()
        };
        let a = train_policy(&s, &preds, &hp).unwrap();
        assert_eq!(a, train_policy(&s, &preds, &hp).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        a.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path).unwrap(), a);
    }
}
