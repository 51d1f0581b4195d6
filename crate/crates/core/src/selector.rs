//! Choosing which explanations to show.
//!
//! X-Selector scores every combination of the day's candidates by how far
//! the user model expects the final order to land from the policy's
//! recommendation, and shows the closest. The fixed strategies are simple
//! rules over the same candidates.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explanations::{enumerate_combinations, DayCandidates, ExplanationCombination, DEFAULT_ENUMERATION_CAP};
use crate::market::Account;
use crate::policy::{policy_action, policy_distribution, realize_fraction, PolicyParams, ACTION_FRACTIONS};
use crate::user_model::{DecisionContext, DecisionPrediction, UserModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyKind {
    Xselector,
    All,
    Argmax,
    Random,
    OnlyPred,
    Plain,
}

impl StrategyKind {
    pub const ALL_KINDS: [StrategyKind; 6] = [
        StrategyKind::Xselector,
        StrategyKind::All,
        StrategyKind::Argmax,
        StrategyKind::Random,
        StrategyKind::OnlyPred,
        StrategyKind::Plain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Xselector => "XSELECTOR",
            StrategyKind::All => "ALL",
            StrategyKind::Argmax => "ARGMAX",
            StrategyKind::Random => "RANDOM",
            StrategyKind::OnlyPred => "ONLY_PRED",
            StrategyKind::Plain => "PLAIN",
        }
    }

    pub fn shows_prediction(self) -> bool {
        self != StrategyKind::Plain
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL_KINDS
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// `|d' + predicted_delta - d_AI|`.
    #[default]
    Expected,
    /// Total variation between the binned decision distribution and the
    /// target distribution.
    Distributional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyTarget {
    /// One-hot on the greedy realized order.
    #[default]
    Greedy,
    /// Softmax over actions, mapped to realized lots.
    Distribution { temperature: f64 },
}

/// What the selector steers towards, in lots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTarget {
    /// Greedy realized order.
    pub d_ai: i64,
    /// `(lots, probability)`, ascending by lots.
    pub distribution: Vec<(i64, f64)>,
}

impl DecisionTarget {
    pub fn one_hot(d_ai: i64) -> Self {
        DecisionTarget {
            d_ai,
            distribution: vec![(d_ai, 1.0)],
        }
    }

    pub fn mean(&self) -> f64 {
        self.distribution.iter().map(|(l, q)| *l as f64 * q).sum()
    }

    pub fn from_policy(policy: &PolicyParams, target: PolicyTarget, ctx: &DecisionContext, account: &Account, price: f64) -> Self {
        let d_ai = policy_action(policy, ctx, account, price).lots;
        match target {
            PolicyTarget::Greedy => DecisionTarget::one_hot(d_ai),
            PolicyTarget::Distribution { temperature } => {
                let probs = policy_distribution(policy, ctx, account, price, temperature);
                let lots = ACTION_FRACTIONS.map(|f| realize_fraction(f, account, price));
                DecisionTarget {
                    d_ai,
                    distribution: merge_bins(lots.iter().copied().zip(probs)),
                }
            }
        }
    }
}

fn merge_bins(items: impl IntoIterator<Item = (i64, f64)>) -> Vec<(i64, f64)> {
    let mut map = std::collections::BTreeMap::new();
    for (l, q) in items {
        *map.entry(l).or_insert(0.0) += q;
    }
    map.into_iter().collect()
}

/// Distance between the user's predicted final order and the target. With
/// `feasible = Some((lo, hi))` predicted orders are first clipped to the
/// range the account allows, as a real order would be.
pub fn decision_distance(
    prediction: &DecisionPrediction,
    initial_order: i64,
    target: &DecisionTarget,
    mode: DistanceMode,
    feasible: Option<(i64, i64)>,
) -> Result<f64> {
    match mode {
        DistanceMode::Expected => {
            let mut d = initial_order as f64 + prediction.predicted_delta;
            if let Some((lo, hi)) = feasible {
                d = d.clamp(lo as f64, hi as f64);
            }
            Ok((d - target.mean()).abs())
        }
        DistanceMode::Distributional => {
            let dist = prediction.distribution.as_ref().ok_or_else(|| {
                Error::Config("distributional distance needs a categorical user model head".into())
            })?;
            let predicted = merge_bins(dist.iter().map(|&(delta, q)| {
                let mut d = initial_order + delta;
                if let Some((lo, hi)) = feasible {
                    d = d.clamp(lo, hi);
                }
                (d, q)
            }));
            let mut diff = std::collections::BTreeMap::new();
            for (l, q) in predicted {
                *diff.entry(l).or_insert(0.0) += q;
            }
            for (l, q) in &target.distribution {
                *diff.entry(*l).or_insert(0.0) -= q;
            }
            Ok(0.5 * diff.values().map(|v: &f64| v.abs()).sum::<f64>())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub mode: DistanceMode,
    pub target: PolicyTarget,
    pub clip_to_feasible: bool,
    pub enumeration_cap: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            mode: DistanceMode::Expected,
            target: PolicyTarget::Greedy,
            clip_to_feasible: true,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub combination: ExplanationCombination,
    /// Distance per combination, indexed by mask.
    pub scores: Vec<f64>,
    pub chosen_distance: f64,
    pub d_ai: i64,
}

/// Index of the smallest score; ties go to fewer flagged items, then the
/// lower mask.
pub fn argmin_combination(scores: &[f64]) -> Result<usize> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN combination score".into()));
    }
    (0..scores.len())
        .min_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then((a as u32).count_ones().cmp(&(b as u32).count_ones()))
                .then(a.cmp(&b))
        })
        .ok_or_else(|| Error::EmptyDataset("no combinations to choose from".into()))
}

/// Scores every combination of `candidates` and returns the closest to the
/// policy's recommendation.
pub fn select_explanations(
    user_model: &UserModel,
    policy: &PolicyParams,
    ctx: &DecisionContext,
    account: &Account,
    price: f64,
    candidates: &DayCandidates,
    config: &SelectorConfig,
) -> Result<SelectionResult> {
    let target = DecisionTarget::from_policy(policy, config.target, ctx, account, price);
    select_for_target(user_model, ctx, account, price, candidates, &target, config)
}

pub fn select_for_target(
    user_model: &UserModel,
    ctx: &DecisionContext,
    account: &Account,
    price: f64,
    candidates: &DayCandidates,
    target: &DecisionTarget,
    config: &SelectorConfig,
) -> Result<SelectionResult> {
    let combos: Vec<ExplanationCombination> = enumerate_combinations(candidates, config.enumeration_cap)?.collect();
    let prepared = user_model.prepare(ctx, candidates)?;
    let feasible = config.clip_to_feasible.then(|| account.feasible_range(price));
    let scores = combos
        .par_iter()
        .map(|c| {
            let pred = prepared.predict(c)?;
            decision_distance(&pred, ctx.initial_order, target, config.mode, feasible)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best = argmin_combination(&scores)?;
    Ok(SelectionResult {
        combination: combos[best],
        chosen_distance: scores[best],
        scores,
        d_ai: target.d_ai,
    })
}

/// Models needed by [`StrategyKind::Xselector`].
#[derive(Clone, Copy)]
pub struct SelectorModels<'a> {
    pub user_model: &'a UserModel,
    pub policy: &'a PolicyParams,
    pub config: &'a SelectorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyChoice {
    pub combination: ExplanationCombination,
    pub show_prediction: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionResult>,
}

pub fn strategy_select(
    kind: StrategyKind,
    ctx: &DecisionContext,
    account: &Account,
    price: f64,
    candidates: &DayCandidates,
    seed: u64,
    models: Option<SelectorModels<'_>>,
) -> Result<StrategyChoice> {
    let n = candidates.len();
    let fixed = |combination| StrategyChoice {
        combination,
        show_prediction: kind.shows_prediction(),
        selection: None,
    };
    Ok(match kind {
        StrategyKind::All => fixed(ExplanationCombination::full(n)),
        StrategyKind::OnlyPred | StrategyKind::Plain => fixed(ExplanationCombination::empty(n)),
        StrategyKind::Argmax => {
            let class = ctx.p.argmax();
            let flags: Vec<bool> = candidates.items().iter().map(|i| i.class == class).collect();
            fixed(ExplanationCombination::from_flags(&flags)?)
        }
        StrategyKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            fixed(ExplanationCombination::from_flags(&flags)?)
        }
        StrategyKind::Xselector => {
            let m = models.ok_or_else(|| Error::Config("XSELECTOR needs a user model and a policy".into()))?;
            let sel = select_explanations(m.user_model, m.policy, ctx, account, price, candidates, m.config)?;
            StrategyChoice {
                combination: sel.combination,
                show_prediction: true,
                selection: Some(sel),
            }
        }
    })
}
