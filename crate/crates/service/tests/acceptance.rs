//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xselector_core::explanations::{enumerate_combinations, ExplanationCombination, DayCandidates};
use xselector_core::market::{apply_order, Account, OhlcBar, Order, PriceClass, PriceSeries};
use xselector_core::nn::gradient_check;
use xselector_core::policy::{greedy_rollout, random_rollout, train_policy, PolicyHyperparams, TrainingSource};
use xselector_core::predictor::{
    labeled_days, loss_and_gradient as predictor_loss_and_gradient, select_scenarios_from_predictions,
    three_class_accuracy, DailyPredictions, FeatureWindow, PredictionDistribution, PredictorParams,
};
use xselector_core::selector::{select_explanations, StrategyKind};
use xselector_core::sim::{
    oracle_dominance, replay_final_value, run_episode, run_experiment, ExperimentConfig, ExperimentOutput,
    Participant, ScenarioSpec, UserPopulation,
};
use xselector_core::stats::{binomial_upper_p, mean, welch_greater};
use xselector_core::synth::{World, WorldConfig};
use xselector_core::user_model::{
    cross_validate, DecisionContext, InteractionRecord, OutputHead, TrainConfig, UserModel, UserModelConfig,
};

type Outcome = anyhow::Result<(bool, String)>;

struct Fixture {
    dir: tempfile::TempDir,
    world: World,
    logs: Vec<InteractionRecord>,
    model: UserModel,
}

fn fixture() -> anyhow::Result<Fixture> {
    let dir = tempfile::tempdir()?;
    let world = World::build(dir.path(), WorldConfig::default())?;
    let logs = world.training_logs(&UserPopulation::default(), 8, 1)?;
    let model = world.train_user_model(&logs, &TrainConfig::default())?;
    Ok(Fixture {
        dir,
        world,
        logs,
        model,
    })
}

fn scenarios(world: &World) -> Vec<(&'static str, std::ops::Range<usize>)> {
    vec![("high", world.scenarios.high.clone()), ("low", world.scenarios.low.clone())]
}

// Exhaustive oracle: its own distance formula and its own minimum.
fn exhaustive_minimum(model: &UserModel, ctx: &DecisionContext, cands: &DayCandidates, account: &Account, price: f64, d_ai: i64) -> anyhow::Result<(f64, Vec<f64>)> {
    let (lo, hi) = account.feasible_range(price);
    let n = cands.len();
    let mut best = f64::INFINITY;
    let mut all = Vec::with_capacity(1 << n);
    for mask in 0..(1u32 << n) {
        let comb = ExplanationCombination::new(mask, n)?;
        let delta = model.predict_decision(ctx, cands, &comb)?.predicted_delta;
        let d = (ctx.initial_order as f64 + delta).clamp(lo as f64, hi as f64);
        let dist = (d - d_ai as f64).abs();
        if dist < best {
            best = dist;
        }
        all.push(dist);
    }
    Ok((best, all))
}

fn argmin_exactness(fx: &Fixture) -> Outcome {
    let env = fx.world.environment(Some(&fx.model));
    let policy = env.policy.expect("world has a policy");
    anyhow::ensure!(fx.model.config.hidden == 64, "user model E = {}", fx.model.config.hidden);
    let mut selector_time = Duration::ZERO;
    let (mut days, mut mismatches) = (0, 0);
    for (_, window) in scenarios(&fx.world) {
        let user = UserPopulation::default().sample(41);
        let mut account = Account::default();
        for day in window {
            let price = env.series.open(day)?;
            let cands = env.store.get(day)?;
            let ctx = env.context(day, &account, user.initial_order(env.series, day, &account)?)?;
            let t = Instant::now();
            let sel = select_explanations(&fx.model, policy, &ctx, &account, price, cands, &env.selector)?;
            selector_time += t.elapsed();
            let (best, all) = exhaustive_minimum(&fx.model, &ctx, cands, &account, price, sel.d_ai)?;
            let chosen = all[sel.combination.mask() as usize];
            if sel.chosen_distance.to_bits() != best.to_bits() || chosen.to_bits() != best.to_bits() || sel.scores.len() != 512 {
                mismatches += 1;
            }
            days += 1;
            let d = user.final_order(&ctx, cands, &sel.combination, true, &account, price);
            account = apply_order(&account, Order(d), price)?;
        }
    }
    Ok((
        mismatches == 0 && days == 120 && selector_time < Duration::from_secs(60),
        format!("{days} days x 512, {mismatches} mismatches, E = 64, selector sweep {:.2}s", selector_time.as_secs_f64()),
    ))
}

fn combination_count(fx: &Fixture) -> Outcome {
    let cands = fx.world.store.get(fx.world.scenarios.high.start)?;
    let combos: Vec<_> = enumerate_combinations(cands, 16)?.collect();
    let mut masks: Vec<u32> = combos.iter().map(|c| c.mask()).collect();
    masks.dedup();
    Ok((
        cands.len() == 9 && combos.len() == 512 && masks.len() == 512,
        format!("{} candidates, {} distinct combinations", cands.len(), masks.len()),
    ))
}

fn oracle_dominance_check(fx: &Fixture) -> Outcome {
    let env = fx.world.environment(Some(&fx.model));
    let rivals = [StrategyKind::All, StrategyKind::Argmax, StrategyKind::Random];
    let (mut days, mut violations) = (0, 0);
    let mut sums = [0.0; 4];
    for (i, (_, window)) in scenarios(&fx.world).into_iter().enumerate() {
        let user = UserPopulation::default().sample(100 + i as u64);
        for d in oracle_dominance(&env, window, user, &rivals, 8)? {
            let x = d.gaps[&StrategyKind::Xselector];
            sums[0] += x;
            for (k, r) in rivals.iter().enumerate() {
                sums[k + 1] += d.gaps[r];
                if x > d.gaps[r] {
                    violations += 1;
                }
            }
            days += 1;
        }
    }
    let n = days as f64;
    Ok((
        violations == 0 && days == 120,
        format!(
            "{days} days, {violations} violations; mean gap XSELECTOR {:.3}, ALL {:.3}, ARGMAX {:.3}, RANDOM {:.3}",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        ),
    ))
}

fn flag_masking(fx: &Fixture) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let days: Vec<usize> = fx.world.store.days().keys().copied().collect();
    let mut differing = 0;
    for _ in 0..1000 {
        let day = days[rng.random_range(0..days.len())];
        let cands = fx.world.store.get(day)?;
        let mask = rng.random_range(0..512u32);
        let comb = ExplanationCombination::new(mask, cands.len())?;
        let b: f64 = rng.random_range(0.0..1.0);
        let n: f64 = rng.random_range(0.0..1.0 - b);
        let ctx = DecisionContext {
            day,
            p: PredictionDistribution::new(b, n, 1.0 - b - n)?,
            total_rate: rng.random_range(-0.3..0.3),
            initial_order: rng.random_range(-15..=15),
        };
        let mut items = cands.items().to_vec();
        for (k, item) in items.iter_mut().enumerate() {
            if !comb.is_flagged(k) {
                item.feature.iter_mut().for_each(|x| *x = rng.random_range(-10.0..10.0));
                if rng.random_bool(0.5) {
                    item.class = PriceClass::ALL[rng.random_range(0..3)];
                }
            }
        }
        let perturbed = DayCandidates::new(day, items)?;
        // Re-sorting after a class change may move items; compare on the
        // flagged set identified by id.
        let ids: Vec<&str> = comb.flagged().map(|k| cands.items()[k].id.as_str()).collect();
        let flags: Vec<bool> = perturbed.items().iter().map(|it| ids.contains(&it.id.as_str())).collect();
        let comb2 = ExplanationCombination::from_flags(&flags)?;
        let a = fx.model.predict_decision(&ctx, cands, &comb)?;
        let b = fx.model.predict_decision(&ctx, &perturbed, &comb2)?;
        if a.predicted_delta.to_bits() != b.predicted_delta.to_bits() || a != b {
            differing += 1;
        }
    }
    Ok((differing == 0, format!("1000 trials, {differing} differing outputs")))
}

fn gradient_checks(fx: &Fixture) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_user = 0.0f64;
    let mut worst_pred = 0.0f64;
    let mut batches = 0;
    for head in [OutputHead::Regression, OutputHead::default_categorical()] {
        let cfg = UserModelConfig {
            hidden: 6,
            head,
            ..fx.world.user_model_config()
        };
        for b in 0..5 {
            let model = UserModel::initialized(cfg, 50 + b)?;
            let batch: Vec<InteractionRecord> = (0..6).map(|_| fx.logs[rng.random_range(0..fx.logs.len())].clone()).collect();
            let (_, grad) = model.loss_and_gradient(&batch, &fx.world.store, 1e-3)?;
            let err = gradient_check(&model.params, &grad, 5, 1e-5, 1e-7, |p| {
                UserModel::new(cfg, p.clone())
                    .and_then(|m| m.loss(&batch, &fx.world.store, 1e-3))
                    .unwrap_or(f64::NAN)
            });
            worst_user = worst_user.max(if err.is_nan() { f64::INFINITY } else { err });
            batches += 1;
        }
    }
    let days = labeled_days(&fx.world.train_series[0], fx.world.config.window)?;
    for b in 0..5 {
        let mut params = PredictorParams::zeros(fx.world.config.window, 8);
        params.feature_mean = fx.world.predictor.feature_mean.clone();
        params.feature_scale = fx.world.predictor.feature_scale.clone();
        let mut init = ChaCha8Rng::seed_from_u64(90 + b);
        for (_, t) in xselector_core::nn::ParamSet::tensors_mut(&mut params.net) {
            t.data.iter_mut().for_each(|x| *x = init.random_range(-0.5..0.5));
        }
        let batch: Vec<(FeatureWindow, PriceClass)> = (0..8)
            .map(|_| {
                let d = &days[rng.random_range(0..days.len())];
                (d.features.clone(), d.label)
            })
            .collect();
        let (_, grad) = predictor_loss_and_gradient(&params, &batch, 1e-3)?;
        let err = gradient_check(&params.net, &grad, 8, 1e-5, 1e-7, |net| {
            let mut q = params.clone();
            q.net = net.clone();
            predictor_loss_and_gradient(&q, &batch, 1e-3).map(|r| r.0).unwrap_or(f64::NAN)
        });
        worst_pred = worst_pred.max(if err.is_nan() { f64::INFINITY } else { err });
        batches += 1;
    }
    Ok((
        worst_user < 1e-4 && worst_pred < 1e-4,
        format!("{batches} batches; worst relative error user model {worst_user:.2e}, predictor {worst_pred:.2e}"),
    ))
}

fn learnability(fx: &Fixture) -> Outcome {
    let population = UserPopulation::default();
    let t = Instant::now();
    let cv = cross_validate(&fx.logs, &fx.world.store, fx.world.user_model_config(), &TrainConfig::default(), 4)?;
    let elapsed = t.elapsed();
    Ok((
        cv.mean >= 0.4 && fx.logs.len() >= 600 && population.noise_sigma == 0.5 && elapsed < Duration::from_secs(300),
        format!(
            "{} records, sigma {}, 4-fold r = {:.3} +/- {:.3}, {:.1}s",
            fx.logs.len(),
            population.noise_sigma,
            cv.mean,
            cv.sd,
            elapsed.as_secs_f64()
        ),
    ))
}

fn predictor_beats_chance(fx: &Fixture) -> Outcome {
    let eval = labeled_days(&fx.world.test_series, fx.world.config.window)?;
    let acc = three_class_accuracy(&fx.world.predictor, &eval)?;
    let hits = (acc * eval.len() as f64).round() as u64;
    let p = binomial_upper_p(hits, eval.len() as u64, 1.0 / 3.0);
    Ok((
        eval.len() >= 200 && acc > 1.0 / 3.0 && p < 0.05,
        format!("held-out accuracy {acc:.4} on {} days, binomial p = {p:.2e}", eval.len()),
    ))
}

fn scenario_selection() -> Outcome {
    let (first_day, len, window) = (30usize, 400usize, 60usize);
    let span = 170..250;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let labels: Vec<PriceClass> = (0..len).map(|_| PriceClass::ALL[rng.random_range(0..3)]).collect();
    let correct: Vec<bool> = (0..len).map(|k| span.contains(&(first_day + k)) || k % 3 == 0).collect();
    let preds: Vec<PredictionDistribution> = labels
        .iter()
        .zip(&correct)
        .map(|(&l, &ok)| {
            let shown = if ok { l } else { PriceClass::from_index((l.index() + 1) % 3).unwrap() };
            PredictionDistribution::one_hot(shown)
        })
        .collect();
    let sel = select_scenarios_from_predictions(first_day, &preds, &labels, window)?;

    // Exhaustive scan over every window.
    let acc = |s: usize| correct[s..s + window].iter().filter(|c| **c).count() as f64 / window as f64;
    let starts = 0..=len - window;
    let best = starts.clone().map(acc).fold(f64::MIN, f64::max);
    let high = sel.high.start - first_day;
    let low = sel.low.start - first_day;
    let closest = starts
        .filter(|s| s.abs_diff(high) >= window)
        .map(|s| (acc(s) - 1.0 / 3.0).abs())
        .fold(f64::MAX, f64::min);
    let inside = sel.high.start >= span.start && sel.high.end <= span.end;
    let low_gap = (acc(low) - 1.0 / 3.0).abs();
    Ok((
        inside && acc(high) == best && low_gap <= 0.05 && low_gap == closest && sel.low.start.abs_diff(sel.high.start) >= window,
        format!(
            "span {span:?}: high {:?} (acc {:.3}, scan max {best:.3}), low {:?} (acc {:.3})",
            sel.high,
            acc(high),
            sel.low,
            acc(low)
        ),
    ))
}

fn monotone_bull() -> (PriceSeries, DailyPredictions) {
    let d0 = NaiveDate::from_ymd_opt(2020, 1, 6).unwrap();
    let bars = (0..200)
        .map(|i| {
            let c = 1000.0 * 1.003f64.powi(i);
            OhlcBar {
                date: d0 + chrono::Days::new(i as u64),
                open: c / 1.001,
                high: c * 1.002,
                low: c / 1.002,
                close: c,
                volume: 1e5,
            }
        })
        .collect();
    let series = PriceSeries::new("BULL", bars).unwrap();
    let preds = DailyPredictions::from_vec(vec![Some(PredictionDistribution::one_hot(PriceClass::Bull)); 200]);
    (series, preds)
}

fn policy_learning() -> Outcome {
    let (series, preds) = monotone_bull();
    let src = TrainingSource {
        series: &series,
        predictions: &preds,
    };
    let mut wins = 0;
    for seed in 0..100u64 {
        let hp = PolicyHyperparams {
            episodes: 100,
            seed,
            ..PolicyHyperparams::default()
        };
        let params = train_policy(&series, &preds, &hp)?;
        let start = 5 + seed as usize;
        let g = greedy_rollout(&params, src, start, 60)?;
        let r = random_rollout(src, start, 60, seed)?;
        wins += (g > r) as usize;
    }
    Ok((wins >= 95, format!("trained beats random in {wins}/100 paired seeds")))
}

fn trading_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut violations = 0;
    let mut trades = 0;
    for _ in 0..10_000 {
        let lot = [1u64, 100, 1000][rng.random_range(0..3)];
        let mut account = Account::new(rng.random_range(0.0..5e6), lot * rng.random_range(0..50), lot)?;
        let mut price: f64 = rng.random_range(100.0..10_000.0);
        for _ in 0..rng.random_range(1..30) {
            price *= rng.random_range(0.9..1.1);
            let (lo, hi) = account.feasible_range(price);
            let lots = rng.random_range(lo - 3..=hi + 3);
            let before = account.cash() + account.shares() as f64 * price;
            match apply_order(&account, Order(lots), price) {
                Ok(next) => {
                    trades += 1;
                    let after = next.cash() + next.shares() as f64 * price;
                    let conserved = (after - before).abs() <= 1e-9 * before.max(1.0);
                    if lots < lo || lots > hi || next.cash() < 0.0 || next.shares() % lot != 0 || !conserved {
                        violations += 1;
                    }
                    account = next;
                }
                Err(_) => {
                    if (lo..=hi).contains(&lots) {
                        violations += 1;
                    }
                }
            }
        }
    }
    Ok((violations == 0, format!("10000 sequences, {trades} executed orders, {violations} violations")))
}

fn experiment(fx: &Fixture, strategies: Vec<StrategyKind>, users: usize) -> anyhow::Result<ExperimentOutput> {
    let env = fx.world.environment(Some(&fx.model));
    let cfg = ExperimentConfig {
        strategies,
        users_per_condition: users,
        scenarios: scenarios(&fx.world)
            .into_iter()
            .map(|(id, w)| ScenarioSpec {
                id: id.to_string(),
                start: w.start,
            })
            .collect(),
        days: fx.world.config.scenario_days,
        master_seed: 2024,
        population: UserPopulation::default(),
    };
    Ok(run_experiment(&env, &cfg)?)
}

fn bit_identical(a: &ExperimentOutput, b: &ExperimentOutput) -> bool {
    let bits = |o: &ExperimentOutput| -> Vec<u64> {
        o.summaries
            .iter()
            .flat_map(|s| s.trajectories.iter())
            .flat_map(|t| t.mean.iter().chain(&t.se).chain(&t.final_values).map(|x| x.to_bits()))
            .collect()
    };
    a == b && bits(a) == bits(b)
}

fn regime_replication(fx: &Fixture, full: &ExperimentOutput) -> Outcome {
    let high = full
        .summaries
        .iter()
        .find(|s| s.scenario == "high")
        .ok_or_else(|| anyhow::anyhow!("no high scenario"))?;
    let argmax = &high.trajectory(StrategyKind::Argmax).unwrap().final_values;
    let plain = &high.trajectory(StrategyKind::Plain).unwrap().final_values;
    let (t, p) = welch_greater(argmax, plain);
    let rerun = experiment(fx, StrategyKind::ALL_KINDS.to_vec(), argmax.len())?;
    let reproducible = bit_identical(full, &rerun);
    Ok((
        argmax.len() == 40 && mean(argmax) > mean(plain) && p < 0.05 && reproducible,
        format!(
            "N = {}, ARGMAX {:.0} vs PLAIN {:.0}, Welch t = {t:.2}, p = {p:.2e}; rerun bit-identical: {reproducible}",
            argmax.len(),
            mean(argmax),
            mean(plain)
        ),
    ))
}

fn replay_fidelity(fx: &Fixture, full: &ExperimentOutput) -> Outcome {
    let mut mismatches = 0;
    for (_, ep) in &full.episodes {
        let v = replay_final_value(&ep.records, &fx.world.test_series)?;
        if v.to_bits() != ep.final_value.to_bits() {
            mismatches += 1;
        }
    }
    let http = tokio::runtime::Runtime::new()?.block_on(http_session(fx))?;
    Ok((
        mismatches == 0 && http.0,
        format!("{} episodes, {mismatches} mismatches; HTTP session: {}", full.episodes.len(), http.1),
    ))
}

// Drives a 60-day XSELECTOR session over HTTP with a rule-based user and
// compares it against replay, a restarted service, and the simulator.
async fn http_session(fx: &Fixture) -> Outcome {
    use serde_json::json;
    use xselector_service::data::write_testbed;
    use xselector_service::session::{DayView, Phase, SessionResult};

    // The world's explanation assets already live in the fixture directory.
    let cfg = write_testbed(fx.dir.path(), &fx.world, Some(&fx.model))?;
    let server = common::Server::start(cfg.clone()).await;
    let client = reqwest::Client::new();
    let user = UserPopulation::default().sample(777);
    let series = &fx.world.test_series;

    let mut view: DayView = client
        .post(server.url("/sessions"))
        .json(&json!({"scenario": "high", "condition": "XSELECTOR", "seed": 1}))
        .send()
        .await?
        .json()
        .await?;
    let id = view.session_id.clone();
    while view.phase != Phase::Finished {
        let account = Account::new(view.account.cash, view.account.shares, view.account.lot_size)?;
        let d_prime = user.initial_order(series, view.day, &account)?;
        let shown: DayView = client
            .post(server.url(&format!("/sessions/{id}/initial-order")))
            .json(&json!({"order": d_prime}))
            .send()
            .await?
            .error_for_status()?
            .json()
            .await?;
        let cands = fx.world.store.get(view.day)?;
        let ids: Vec<String> = shown.explanations.iter().flatten().map(|e| e.id.clone()).collect();
        let flags: Vec<bool> = cands.items().iter().map(|it| ids.contains(&it.id)).collect();
        let ctx = DecisionContext {
            day: view.day,
            p: fx.world.test_predictions.get(view.day)?,
            total_rate: view.account.total_assets / xselector_core::market::INITIAL_CASH - 1.0,
            initial_order: d_prime,
        };
        let d = user.final_order(
            &ctx,
            cands,
            &ExplanationCombination::from_flags(&flags)?,
            shown.prediction.is_some(),
            &account,
            view.open,
        );
        view = client
            .post(server.url(&format!("/sessions/{id}/final-order")))
            .json(&json!({"order": d}))
            .send()
            .await?
            .error_for_status()?
            .json()
            .await?;
    }
    let result: SessionResult = client.get(server.url(&format!("/sessions/{id}/result"))).send().await?.json().await?;
    server.stop();
    let final_value = result.final_value.unwrap_or(f64::NAN);
    let replayed = replay_final_value(&result.records, series)?;

    let restarted = common::Server::start(cfg).await;
    let again: SessionResult = client.get(restarted.url(&format!("/sessions/{id}/result"))).send().await?.json().await?;
    restarted.stop();

    let env = fx.world.environment(Some(&fx.model));
    let sim = run_episode(&env, StrategyKind::Xselector, fx.world.scenarios.high.clone(), &Participant::rule(user), "sim")?;

    let ok = result.finished
        && result.records.len() == 60
        && replayed.to_bits() == final_value.to_bits()
        && again == result
        && sim.final_value.to_bits() == final_value.to_bits();
    Ok((
        ok,
        format!(
            "final {final_value:.0}, replay {replayed:.0}, after restart {:.0}, simulator {:.0}",
            again.final_value.unwrap_or(f64::NAN),
            sim.final_value
        ),
    ))
}

fn run(name: &str, failures: &mut usize, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let secs = t.elapsed().as_secs_f64();
    let (pass, detail) = match outcome {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e:#}")),
        Err(_) => (false, "panicked".to_string()),
    };
    if !pass {
        *failures += 1;
    }
    println!("{} {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
}

fn main() {
    let t = Instant::now();
    let fx = match fixture() {
        Ok(f) => f,
        Err(e) => {
            println!("FAIL fixture: {e:#}");
            std::process::exit(1);
        }
    };
    println!(
        "fixture: {} test bars, scenarios high {:?} low {:?}, {} log records [{:.1}s]",
        fx.world.test_series.len(),
        fx.world.scenarios.high,
        fx.world.scenarios.low,
        fx.logs.len(),
        t.elapsed().as_secs_f64()
    );
    let mut failures = 0;
    let f = &mut failures;
    run("argmin exactness", f, || argmin_exactness(&fx));
    run("combination count", f, || combination_count(&fx));
    run("oracle-user dominance", f, || oracle_dominance_check(&fx));
    run("flag-masking invariance", f, || flag_masking(&fx));
    run("gradient checks", f, || gradient_checks(&fx));
    run("user model learnability", f, || learnability(&fx));
    run("predictor beats chance", f, || predictor_beats_chance(&fx));
    run("scenario selection", f, scenario_selection);
    run("policy learning", f, policy_learning);
    run("trading invariants", f, trading_invariants);
    let full = experiment(&fx, StrategyKind::ALL_KINDS.to_vec(), 40);
    match &full {
        Ok(full) => {
            run("regime replication", f, || regime_replication(&fx, full));
            run("replay fidelity", f, || replay_fidelity(&fx, full));
        }
        Err(e) => {
            for name in ["regime replication", "replay fidelity"] {
                println!("FAIL {name}: experiment failed: {e:#}");
                *f += 1;
            }
        }
    }
    println!("{} criteria failed [{:.1}s total]", failures, t.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
