//! Participant sessions as an append-only event log.
//!
//! Every state change is first planned against the current state, then
//! appended to `<log_dir>/<id>.jsonl`, and only then applied. Loading a
//! session replays the same `apply` path, so a restarted service sees the
//! exact state it had before.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use xselector_core::explanations::{Modality, Payload};
use xselector_core::market::{apply_order, final_liquidation, total_assets, Account, OhlcBar, Order, PriceClass, INITIAL_CASH};
use xselector_core::predictor::PredictionDistribution;
use xselector_core::selector::{strategy_select, StrategyChoice, StrategyKind};
use xselector_core::sim::mix_seed;
use xselector_core::user_model::{DecisionContext, InteractionRecord};

use crate::data::DataBundle;

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl From<xselector_core::Error> for SessionError {
    fn from(e: xselector_core::Error) -> Self {
        SessionError::Internal(e.into())
    }
}

type SessionResultT<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingInitial,
    AwaitingFinal,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        scenario: String,
        condition: StrategyKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        participant: Option<String>,
        start_day: usize,
        days: usize,
        seed: u64,
        created_at: DateTime<Utc>,
    },
    InitialOrder {
        day: usize,
        initial_order: i64,
        context: DecisionContext,
        choice: StrategyChoice,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        idempotency_key: Option<String>,
    },
    FinalOrder {
        day: usize,
        record: InteractionRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        idempotency_key: Option<String>,
    },
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub scenario: String,
    pub condition: String,
    #[serde(default)]
    pub participant: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct OrderRequest {
    pub order: i64,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountView {
    pub cash: f64,
    pub shares: u64,
    pub lots: i64,
    pub lot_size: u64,
    /// Valued at the day's open.
    pub total_assets: f64,
    pub min_order: i64,
    pub max_order: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationView {
    pub id: String,
    pub modality: Modality,
    pub class: PriceClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayView {
    pub session_id: String,
    pub condition: StrategyKind,
    pub phase: Phase,
    /// 1-based position within the session.
    pub day_number: usize,
    pub total_days: usize,
    pub day: usize,
    pub date: chrono::NaiveDate,
    pub open: f64,
    /// Bars strictly before `day`.
    pub chart: Vec<OhlcBar>,
    pub account: AccountView,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_order: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PredictionDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanations: Option<Vec<ExplanationView>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session_id: String,
    pub scenario: String,
    pub condition: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant: Option<String>,
    pub start_day: usize,
    pub days: usize,
    pub days_completed: usize,
    pub finished: bool,
    /// Total assets before the first day and after each completed day, at the close.
    pub assets: Vec<f64>,
    /// Liquidated value; present once finished.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_value: Option<f64>,
    pub records: Vec<InteractionRecord>,
}

#[derive(Debug, Clone)]
struct Pending {
    initial_order: i64,
    context: DecisionContext,
    choice: StrategyChoice,
}

#[derive(Debug, Clone, PartialEq)]
enum Fingerprint {
    Initial(i64),
    Final(i64),
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub scenario: String,
    pub condition: StrategyKind,
    pub participant: Option<String>,
    pub start_day: usize,
    pub days: usize,
    pub seed: u64,
    pub created_at: DateTime<Utc>,
    account: Account,
    completed: usize,
    pending: Option<Pending>,
    records: Vec<InteractionRecord>,
    assets: Vec<f64>,
    final_value: Option<f64>,
    seen: HashMap<String, (Fingerprint, DayView)>,
    last_view: Option<DayView>,
    log_path: PathBuf,
}

pub fn log_path(log_dir: &Path, id: &str) -> PathBuf {
    log_dir.join(format!("{id}.jsonl"))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Session {
    /// Creates a session and writes its first event.
    pub fn create(data: &DataBundle, id: String, req: &CreateSession, log_dir: &Path) -> SessionResultT<Session> {
        if !valid_id(&id) {
            return Err(SessionError::BadRequest(format!("invalid session id `{id}`")));
        }
        let condition: StrategyKind = req
            .condition
            .parse()
            .map_err(|e: xselector_core::Error| SessionError::BadRequest(e.to_string()))?;
        let start_day = *data
            .config
            .scenarios
            .get(&req.scenario)
            .ok_or_else(|| SessionError::BadRequest(format!("unknown scenario `{}`", req.scenario)))?;
        if condition == StrategyKind::Xselector && data.environment().models().is_none() {
            return Err(SessionError::BadRequest(
                "XSELECTOR needs both a user model and a policy".into(),
            ));
        }
        let event = Event::Created {
            session_id: id.clone(),
            scenario: req.scenario.clone(),
            condition,
            participant: req.participant.clone(),
            start_day,
            days: data.config.scenario_days,
            seed: req.seed.unwrap_or_else(|| mix_seed(&[uuid::Uuid::new_v4().as_u64_pair().0])),
            created_at: Utc::now(),
        };
        let path = log_path(log_dir, &id);
        if path.exists() {
            return Err(SessionError::Conflict(format!("session `{id}` already exists")));
        }
        let session = Session::from_created(&event, path)?;
        session.check_start(data)?;
        session.persist(&event)?;
        Ok(session)
    }

    fn from_created(event: &Event, log_path: PathBuf) -> SessionResultT<Session> {
        let Event::Created {
            session_id,
            scenario,
            condition,
            participant,
            start_day,
            days,
            seed,
            created_at,
        } = event
        else {
            return Err(SessionError::Internal(anyhow::anyhow!("log does not start with a `created` event")));
        };
        Ok(Session {
            id: session_id.clone(),
            scenario: scenario.clone(),
            condition: *condition,
            participant: participant.clone(),
            start_day: *start_day,
            days: *days,
            seed: *seed,
            created_at: *created_at,
            account: Account::default(),
            completed: 0,
            pending: None,
            records: Vec::new(),
            assets: vec![INITIAL_CASH],
            final_value: None,
            seen: HashMap::new(),
            last_view: None,
            log_path,
        })
    }

    fn check_start(&self, data: &DataBundle) -> SessionResultT<()> {
        data.environment()
            .check_window(&(self.start_day..self.start_day + self.days))
            .map_err(|e| SessionError::BadRequest(e.to_string()))
    }

    /// Rebuilds a session from its log.
    pub fn load(data: &DataBundle, path: &Path) -> anyhow::Result<Session> {
        let reader = BufReader::new(File::open(path)?);
        let mut session: Option<Session> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: Event = serde_json::from_str(&line)
                .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?;
            match session.as_mut() {
                None => session = Some(Session::from_created(&event, path.to_path_buf())?),
                Some(s) => s.apply(data, &event)?,
            }
        }
        let session = session.ok_or_else(|| anyhow::anyhow!("{} is empty", path.display()))?;
        session.check_start(data)?;
        Ok(session)
    }

    pub fn phase(&self) -> Phase {
        if self.completed == self.days {
            Phase::Finished
        } else if self.pending.is_some() {
            Phase::AwaitingFinal
        } else {
            Phase::AwaitingInitial
        }
    }

    fn current_day(&self) -> usize {
        self.start_day + self.completed
    }

    pub fn view(&self, data: &DataBundle) -> SessionResultT<DayView> {
        if self.phase() == Phase::Finished {
            return Err(SessionError::Conflict("session is finished".into()));
        }
        self.view_of(data, self.current_day())
    }

    fn view_of(&self, data: &DataBundle, day: usize) -> SessionResultT<DayView> {
        let bar = data.series.bar(day)?;
        let chart_from = day.saturating_sub(data.config.chart_bars);
        let (min_order, max_order) = self.account.feasible_range(bar.open);
        let mut view = DayView {
            session_id: self.id.clone(),
            condition: self.condition,
            phase: self.phase(),
            day_number: day - self.start_day + 1,
            total_days: self.days,
            day,
            date: bar.date,
            open: bar.open,
            chart: data.series.bars()[chart_from..day].to_vec(),
            account: AccountView {
                cash: self.account.cash(),
                shares: self.account.shares(),
                lots: self.account.held_lots(),
                lot_size: self.account.lot_size(),
                total_assets: total_assets(&self.account, bar.open),
                min_order,
                max_order,
            },
            initial_order: None,
            prediction: None,
            explanations: None,
        };
        if let Some(p) = &self.pending {
            view.initial_order = Some(p.initial_order);
            if p.choice.show_prediction {
                view.prediction = Some(p.context.p);
                let cands = data.store.get(day)?;
                view.explanations = Some(
                    p.choice
                        .combination
                        .flagged()
                        .map(|k| {
                            let item = &cands.items()[k];
                            ExplanationView {
                                id: item.id.clone(),
                                modality: item.modality,
                                class: item.class,
                                text: item.text().map(str::to_string),
                                image_url: matches!(item.payload, Payload::Image(_)).then(|| format!("/assets/{}", item.id)),
                            }
                        })
                        .collect(),
                );
            }
        }
        Ok(view)
    }

    pub fn result(&self) -> SessionResult {
        SessionResult {
            session_id: self.id.clone(),
            scenario: self.scenario.clone(),
            condition: self.condition,
            participant: self.participant.clone(),
            start_day: self.start_day,
            days: self.days,
            days_completed: self.completed,
            finished: self.phase() == Phase::Finished,
            assets: self.assets.clone(),
            final_value: self.final_value,
            records: self.records.clone(),
        }
    }

    fn replayed(&self, key: &Option<String>, fp: &Fingerprint) -> SessionResultT<Option<DayView>> {
        let Some(key) = key else { return Ok(None) };
        match self.seen.get(key) {
            None => Ok(None),
            Some((seen, view)) if seen == fp => Ok(Some(view.clone())),
            Some(_) => Err(SessionError::Conflict(format!(
                "idempotency key `{key}` was already used for a different request"
            ))),
        }
    }

    fn check_feasible(&self, order: i64, price: f64) -> SessionResultT<()> {
        let (lo, hi) = self.account.feasible_range(price);
        if order < lo || order > hi {
            return Err(SessionError::Infeasible(format!("order {order} is outside the feasible range [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Records `d'` and returns the view with whatever the condition shows.
    pub fn submit_initial(&mut self, data: &DataBundle, req: &OrderRequest) -> SessionResultT<DayView> {
        let day = self.current_day();
        let fp = Fingerprint::Initial(req.order);
        if let Some(view) = self.replayed(&req.idempotency_key, &fp)? {
            return Ok(view);
        }
        if self.phase() != Phase::AwaitingInitial {
            return Err(SessionError::Conflict(format!(
                "initial order not accepted while {:?}",
                self.phase()
            )));
        }
        let price = data.series.open(day)?;
        self.check_feasible(req.order, price)?;
        let env = data.environment();
        let context = env.context(day, &self.account, req.order)?;
        let choice = strategy_select(
            self.condition,
            &context,
            &self.account,
            price,
            data.store.get(day)?,
            mix_seed(&[self.seed, day as u64]),
            env.models(),
        )?;
        let event = Event::InitialOrder {
            day,
            initial_order: req.order,
            context,
            choice,
            idempotency_key: req.idempotency_key.clone(),
        };
        self.commit(data, &event)
    }

    /// Executes `d` and moves to the next day.
    pub fn submit_final(&mut self, data: &DataBundle, req: &OrderRequest) -> SessionResultT<DayView> {
        let day = self.current_day();
        let fp = Fingerprint::Final(req.order);
        if let Some(view) = self.replayed(&req.idempotency_key, &fp)? {
            return Ok(view);
        }
        let Some(pending) = self.pending.as_ref().filter(|_| self.phase() == Phase::AwaitingFinal) else {
            return Err(SessionError::Conflict(format!("final order not accepted while {:?}", self.phase())));
        };
        let price = data.series.open(day)?;
        self.check_feasible(req.order, price)?;
        let event = Event::FinalOrder {
            day,
            record: InteractionRecord {
                session_id: self.id.clone(),
                timestamp: Utc::now().timestamp_millis(),
                context: pending.context,
                combination: pending.choice.combination,
                final_order: req.order,
            },
            idempotency_key: req.idempotency_key.clone(),
        };
        self.commit(data, &event)
    }

    fn commit(&mut self, data: &DataBundle, event: &Event) -> SessionResultT<DayView> {
        // Validate against a copy so a failing apply leaves nothing behind.
        let mut next = self.clone();
        next.apply(data, event)?;
        self.persist(event)?;
        *self = next;
        Ok(self.last_view.clone().expect("set by apply"))
    }

    fn persist(&self, event: &Event) -> SessionResultT<()> {
        let mut line = serde_json::to_string(event).map_err(anyhow::Error::from)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log_path)
            .map_err(anyhow::Error::from)?;
        f.write_all(line.as_bytes()).map_err(anyhow::Error::from)?;
        f.sync_data().map_err(anyhow::Error::from)?;
        Ok(())
    }

    fn apply(&mut self, data: &DataBundle, event: &Event) -> SessionResultT<()> {
        let day = self.current_day();
        match event {
            Event::Created { .. } => {
                return Err(SessionError::Internal(anyhow::anyhow!("duplicate `created` event")));
            }
            Event::InitialOrder {
                day: d,
                initial_order,
                context,
                choice,
                idempotency_key,
            } => {
                if *d != day || self.phase() != Phase::AwaitingInitial || context.day != day {
                    return Err(SessionError::Internal(anyhow::anyhow!("out-of-order initial order for day {d}")));
                }
                choice.combination.check_len(data.store.get(day)?)?;
                self.pending = Some(Pending {
                    initial_order: *initial_order,
                    context: *context,
                    choice: choice.clone(),
                });
                let view = self.view(data)?;
                if let Some(k) = idempotency_key {
                    self.seen.insert(
                        k.clone(),
                        (Fingerprint::Initial(*initial_order), view.clone()),
                    );
                }
                self.last_view = Some(view);
            }
            Event::FinalOrder {
                day: d,
                record,
                idempotency_key,
            } => {
                let pending = self
                    .pending
                    .take()
                    .filter(|_| *d == day)
                    .ok_or_else(|| anyhow::anyhow!("out-of-order final order for day {d}"))?;
                if record.context != pending.context || record.combination != pending.choice.combination {
                    return Err(SessionError::Internal(anyhow::anyhow!(
                        "final order for day {d} does not match the pending context"
                    )));
                }
                let price = data.series.open(day)?;
                self.account = apply_order(&self.account, Order(record.final_order), price)?;
                self.assets.push(total_assets(&self.account, data.series.bar(day)?.close));
                self.records.push(record.clone());
                self.completed += 1;
                let view = if self.phase() == Phase::Finished {
                    self.final_value = Some(final_liquidation(&self.account, &data.series, day)?);
                    self.view_of(data, day)?
                } else {
                    self.view(data)?
                };
                if let Some(k) = idempotency_key {
                    self.seen.insert(
                        k.clone(),
                        (Fingerprint::Final(record.final_order), view.clone()),
                    );
                }
                self.last_view = Some(view);
            }
        }
        Ok(())
    }
}
