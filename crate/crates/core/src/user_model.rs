//! Model of how a user revises their order after seeing explanations.
//!
//! The context (day, prediction `p`, total rate `r`, initial order `d'`) is
//! embedded into four hidden vectors. Each modality is aggregated as
//!
//! ```text
//! h_m = sum_k flag_k * [type_k == m] * (proj_m(feature_k) ⊙ class_embedding[class_k])
//! ```
//!
//! and the six vectors are concatenated into a three-layer head that
//! predicts the shift `d - d'` in lots, either as a scalar or as a
//! distribution over integer bins.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explanations::{DayCandidates, ExplanationCombination, ExplanationStore, Modality};
use crate::nn::{self, Matrix, MomentumSgd, ParamSet, WeightFile};
use crate::predictor::PredictionDistribution;
use crate::stats;

/// Context `c` of one decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    /// Absolute index of the trading day; also selects the day embedding.
    pub day: usize,
    pub p: PredictionDistribution,
    /// Total assets at the day's open over the initial capital, minus one.
    pub total_rate: f64,
    /// Initial order `d'` in lots.
    pub initial_order: i64,
}

/// One logged day: what was shown and what the user finally ordered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub session_id: String,
    /// Unix milliseconds.
    pub timestamp: i64,
    pub context: DecisionContext,
    pub combination: ExplanationCombination,
    pub final_order: i64,
}

impl InteractionRecord {
    pub fn delta(&self) -> i64 {
        self.final_order - self.context.initial_order
    }
}

pub fn write_jsonl<W: Write>(records: &[InteractionRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("writing interaction log", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<InteractionRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading interaction log", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: "<interaction log>".into(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<InteractionRecord>> {
    let path = path.as_ref();
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_jsonl(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputHead {
    /// Scalar regression of `d - d'`.
    Regression,
    /// Softmax over integer shifts `min_delta ..= max_delta`.
    Categorical { min_delta: i64, max_delta: i64 },
}

impl OutputHead {
    pub fn outputs(&self) -> usize {
        match *self {
            OutputHead::Regression => 1,
            OutputHead::Categorical {
                min_delta,
                max_delta,
            } => (max_delta - min_delta + 1) as usize,
        }
    }

    pub fn default_categorical() -> Self {
        OutputHead::Categorical {
            min_delta: -5,
            max_delta: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserModelConfig {
    /// Rows of the day-embedding table.
    pub num_days: usize,
    /// Length of explanation feature vectors.
    pub feature_dim: usize,
    pub hidden: usize,
    /// `d'` is fed as `d' / max_lots`.
    pub max_lots: f64,
    pub head: OutputHead,
}

impl UserModelConfig {
    pub fn new(num_days: usize, feature_dim: usize) -> Self {
        UserModelConfig {
            num_days,
            feature_dim,
            hidden: 64,
            max_lots: 15.0,
            head: OutputHead::Regression,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_days == 0 || self.feature_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("user model dimensions must be positive".into()));
        }
        if !(self.max_lots > 0.0) {
            return Err(Error::Config("max_lots must be positive".into()));
        }
        if let OutputHead::Categorical {
            min_delta,
            max_delta,
        } = self.head
        {
            if max_delta <= min_delta {
                return Err(Error::Config("categorical head needs at least two bins".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserModelParams {
    pub day_embedding: Matrix,
    pub p_weight: Matrix,
    pub p_bias: Matrix,
    pub rate_weight: Matrix,
    pub rate_bias: Matrix,
    pub order_weight: Matrix,
    pub order_bias: Matrix,
    pub saliency_weight: Matrix,
    pub saliency_bias: Matrix,
    pub text_weight: Matrix,
    pub text_bias: Matrix,
    /// One row per price class.
    pub class_embedding: Matrix,
    pub head1_weight: Matrix,
    pub head1_bias: Matrix,
    pub head2_weight: Matrix,
    pub head2_bias: Matrix,
    pub out_weight: Matrix,
    pub out_bias: Matrix,
}

macro_rules! impl_param_set {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl ParamSet for $ty {
            fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
                vec![$((stringify!($field), &self.$field)),*]
            }

            fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
                vec![$((stringify!($field), &mut self.$field)),*]
            }
        }
    };
}

impl_param_set!(UserModelParams {
    day_embedding,
    p_weight,
    p_bias,
    rate_weight,
    rate_bias,
    order_weight,
    order_bias,
    saliency_weight,
    saliency_bias,
    text_weight,
    text_bias,
    class_embedding,
    head1_weight,
    head1_bias,
    head2_weight,
    head2_bias,
    out_weight,
    out_bias,
});

impl UserModelParams {
    pub fn zeros(cfg: &UserModelConfig) -> Self {
        let e = cfg.hidden;
        let f = cfg.feature_dim;
        let k = cfg.head.outputs();
        UserModelParams {
            day_embedding: Matrix::zeros(cfg.num_days, e),
            p_weight: Matrix::zeros(e, 3),
            p_bias: Matrix::zeros(e, 1),
            rate_weight: Matrix::zeros(e, 1),
            rate_bias: Matrix::zeros(e, 1),
            order_weight: Matrix::zeros(e, 1),
            order_bias: Matrix::zeros(e, 1),
            saliency_weight: Matrix::zeros(e, f),
            saliency_bias: Matrix::zeros(e, 1),
            text_weight: Matrix::zeros(e, f),
            text_bias: Matrix::zeros(e, 1),
            class_embedding: Matrix::zeros(3, e),
            head1_weight: Matrix::zeros(e, 6 * e),
            head1_bias: Matrix::zeros(e, 1),
            head2_weight: Matrix::zeros(e, e),
            head2_bias: Matrix::zeros(e, 1),
            out_weight: Matrix::zeros(k, e),
            out_bias: Matrix::zeros(k, 1),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero. Lookup tables use
    /// `±1/sqrt(hidden)` for days and `±1` for classes.
    pub fn init(cfg: &UserModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = cfg.hidden;
        let f = cfg.feature_dim;
        let k = cfg.head.outputs();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = UserModelParams::zeros(cfg);
        p.day_embedding = Matrix::uniform(cfg.num_days, e, fan(e), &mut rng);
        p.p_weight = Matrix::uniform(e, 3, fan(3), &mut rng);
        p.rate_weight = Matrix::uniform(e, 1, 1.0, &mut rng);
        p.order_weight = Matrix::uniform(e, 1, 1.0, &mut rng);
        p.saliency_weight = Matrix::uniform(e, f, fan(f), &mut rng);
        p.text_weight = Matrix::uniform(e, f, fan(f), &mut rng);
        p.class_embedding = Matrix::uniform(3, e, 1.0, &mut rng);
        p.head1_weight = Matrix::uniform(e, 6 * e, fan(6 * e), &mut rng);
        p.head2_weight = Matrix::uniform(e, e, fan(e), &mut rng);
        p.out_weight = Matrix::uniform(k, e, fan(e), &mut rng);
        p
    }
}

/// Predicted shift `d - d'` in lots. With a categorical head the shift is the
/// expectation of `distribution`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPrediction {
    pub predicted_delta: f64,
    /// `(delta, probability)` per bin, ascending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<Vec<(i64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserModel {
    pub config: UserModelConfig,
    pub params: UserModelParams,
}

struct HeadTrace {
    z0: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
}

const WEIGHT_KIND: &str = "user_model";

impl UserModel {
    pub fn new(config: UserModelConfig, params: UserModelParams) -> Result<Self> {
        config.validate()?;
        let expected = UserModelParams::zeros(&config);
        for ((name, a), (_, b)) in params.tensors().into_iter().zip(expected.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "`{name}` is {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(UserModel { config, params })
    }

    pub fn initialized(config: UserModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(UserModel {
            params: UserModelParams::init(&config, seed),
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        WeightFile::from_params(WEIGHT_KIND, self.config, &self.params).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: WeightFile<UserModelConfig> = WeightFile::load(path)?;
        file.config.validate()?;
        let mut params = UserModelParams::zeros(&file.config);
        file.fill_params(WEIGHT_KIND, &mut params)?;
        Ok(UserModel {
            config: file.config,
            params,
        })
    }

    /// `[h_i | h_p | h_r | h_d']`.
    fn encode_context(&self, ctx: &DecisionContext) -> Result<Vec<f64>> {
        let e = self.config.hidden;
        if ctx.day >= self.config.num_days {
            return Err(Error::Range(format!(
                "day {} outside the embedding table of {} days",
                ctx.day, self.config.num_days
            )));
        }
        let p = &self.params;
        let mut base = vec![0.0; 4 * e];
        base[..e].copy_from_slice(p.day_embedding.row(ctx.day));
        p.p_weight
            .affine(&ctx.p.as_array(), &p.p_bias.data, &mut base[e..2 * e]);
        p.rate_weight
            .affine(&[ctx.total_rate], &p.rate_bias.data, &mut base[2 * e..3 * e]);
        let order = ctx.initial_order as f64 / self.config.max_lots;
        p.order_weight
            .affine(&[order], &p.order_bias.data, &mut base[3 * e..]);
        Ok(base)
    }

    fn project(&self, modality: Modality, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "explanation feature has {} values, model expects {}",
                feature.len(),
                self.config.feature_dim
            )));
        }
        let (w, b) = match modality {
            Modality::Saliency => (&self.params.saliency_weight, &self.params.saliency_bias),
            Modality::Text => (&self.params.text_weight, &self.params.text_bias),
        };
        let mut out = vec![0.0; self.config.hidden];
        w.affine(feature, &b.data, &mut out);
        Ok(out)
    }

    fn head_forward(&self, z0: Vec<f64>) -> HeadTrace {
        let p = &self.params;
        let e = self.config.hidden;
        let mut a1 = vec![0.0; e];
        p.head1_weight.affine(&z0, &p.head1_bias.data, &mut a1);
        a1.iter_mut().for_each(|v| *v = v.tanh());
        let mut a2 = vec![0.0; e];
        p.head2_weight.affine(&a1, &p.head2_bias.data, &mut a2);
        a2.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = vec![0.0; p.out_weight.rows];
        p.out_weight.affine(&a2, &p.out_bias.data, &mut out);
        HeadTrace { z0, a1, a2, out }
    }

    /// Backpropagates `g_out` through the head into `grad`; returns dL/dz0.
    fn head_backward(&self, trace: &HeadTrace, g_out: &[f64], grad: &mut UserModelParams) -> Vec<f64> {
        let p = &self.params;
        let e = self.config.hidden;
        grad.out_weight.add_outer(g_out, &trace.a2);
        nn::axpy(1.0, g_out, &mut grad.out_bias.data);
        let mut g_a2 = vec![0.0; e];
        p.out_weight.add_transpose_mul(g_out, &mut g_a2);
        for (g, a) in g_a2.iter_mut().zip(&trace.a2) {
            *g *= 1.0 - a * a;
        }
        grad.head2_weight.add_outer(&g_a2, &trace.a1);
        nn::axpy(1.0, &g_a2, &mut grad.head2_bias.data);
        let mut g_a1 = vec![0.0; e];
        p.head2_weight.add_transpose_mul(&g_a2, &mut g_a1);
        for (g, a) in g_a1.iter_mut().zip(&trace.a1) {
            *g *= 1.0 - a * a;
        }
        grad.head1_weight.add_outer(&g_a1, &trace.z0);
        nn::axpy(1.0, &g_a1, &mut grad.head1_bias.data);
        let mut g_z0 = vec![0.0; 6 * e];
        p.head1_weight.add_transpose_mul(&g_a1, &mut g_z0);
        g_z0
    }

    fn to_prediction(&self, out: &[f64]) -> DecisionPrediction {
        match self.config.head {
            OutputHead::Regression => DecisionPrediction {
                predicted_delta: out[0],
                distribution: None,
            },
            OutputHead::Categorical { min_delta, .. } => {
                let probs = nn::softmax(out);
                let dist: Vec<(i64, f64)> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| (min_delta + i as i64, q))
                    .collect();
                let expectation = dist.iter().map(|(d, q)| *d as f64 * q).sum();
                DecisionPrediction {
                    predicted_delta: expectation,
                    distribution: Some(dist),
                }
            }
        }
    }

    /// Precomputes everything that does not depend on the combination.
    pub fn prepare<'a>(&'a self, ctx: &DecisionContext, candidates: &DayCandidates) -> Result<PreparedContext<'a>> {
        let base = self.encode_context(ctx)?;
        let contributions = candidates
            .items()
            .iter()
            .map(|item| {
                let mut v = self.project(item.modality, &item.feature)?;
                let class = self.params.class_embedding.row(item.class.index());
                v.iter_mut().zip(class).for_each(|(a, c)| *a *= c);
                Ok((item.modality, v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedContext {
            model: self,
            base,
            contributions,
        })
    }

    /// `(h_saliency, h_text)` for `combination`.
    pub fn aggregate_explanations(
        &self,
        candidates: &DayCandidates,
        combination: &ExplanationCombination,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        combination.check_len(candidates)?;
        let e = self.config.hidden;
        let mut sal = vec![0.0; e];
        let mut text = vec![0.0; e];
        for k in combination.flagged() {
            let item = &candidates.items()[k];
            let proj = self.project(item.modality, &item.feature)?;
            let class = self.params.class_embedding.row(item.class.index());
            let target = match item.modality {
                Modality::Saliency => &mut sal,
                Modality::Text => &mut text,
            };
            for ((t, v), c) in target.iter_mut().zip(&proj).zip(class) {
                *t += v * c;
            }
        }
        Ok((sal, text))
    }

    pub fn predict_decision(
        &self,
        ctx: &DecisionContext,
        candidates: &DayCandidates,
        combination: &ExplanationCombination,
    ) -> Result<DecisionPrediction> {
        self.prepare(ctx, candidates)?.predict(combination)
    }

    /// Mean loss over `records` (squared error / 2 for regression,
    /// cross-entropy for the categorical head) plus `0.5 * l2 * |θ|²`, and its
    /// gradient.
    pub fn loss_and_gradient(
        &self,
        records: &[InteractionRecord],
        store: &ExplanationStore,
        l2: f64,
    ) -> Result<(f64, UserModelParams)> {
        let refs: Vec<&InteractionRecord> = records.iter().collect();
        self.batch_loss_and_gradient(&refs, store, l2)
    }

    pub fn loss(&self, records: &[InteractionRecord], store: &ExplanationStore, l2: f64) -> Result<f64> {
        Ok(self.loss_and_gradient(records, store, l2)?.0)
    }

    fn batch_loss_and_gradient(
        &self,
        batch: &[&InteractionRecord],
        store: &ExplanationStore,
        l2: f64,
    ) -> Result<(f64, UserModelParams)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("user model batch".into()));
        }
        let e = self.config.hidden;
        let n = batch.len() as f64;
        let mut grad = UserModelParams::zeros(&self.config);

        // Flagged items are projected once per batch.
        let mut slots: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut items = Vec::new();
        let mut projections = Vec::new();
        for r in batch {
            let cands = store.get(r.context.day)?;
            r.combination.check_len(cands)?;
            for k in r.combination.flagged() {
                if let std::collections::btree_map::Entry::Vacant(slot) = slots.entry((r.context.day, k)) {
                    let item = &cands.items()[k];
                    projections.push(self.project(item.modality, &item.feature)?);
                    items.push(item);
                    slot.insert(items.len() - 1);
                }
            }
        }
        let mut d_proj = vec![vec![0.0; e]; items.len()];

        let mut loss = 0.0;
        for r in batch {
            let ctx = &r.context;
            let mut z0 = self.encode_context(ctx)?;
            z0.resize(6 * e, 0.0);
            for k in r.combination.flagged() {
                let u = slots[&(ctx.day, k)];
                let item = items[u];
                let class = self.params.class_embedding.row(item.class.index());
                let offset = match item.modality {
                    Modality::Saliency => 4 * e,
                    Modality::Text => 5 * e,
                };
                for j in 0..e {
                    z0[offset + j] += projections[u][j] * class[j];
                }
            }
            let trace = self.head_forward(z0);
            let target = r.delta();
            let g_out = match self.config.head {
                OutputHead::Regression => {
                    let err = trace.out[0] - target as f64;
                    loss += 0.5 * err * err;
                    vec![err / n]
                }
                OutputHead::Categorical {
                    min_delta,
                    max_delta,
                } => {
                    let probs = nn::softmax(&trace.out);
                    let bin = (target.clamp(min_delta, max_delta) - min_delta) as usize;
                    loss -= probs[bin].max(1e-300).ln();
                    let mut g = probs;
                    g[bin] -= 1.0;
                    g.iter_mut().for_each(|v| *v /= n);
                    g
                }
            };
            let g_z0 = self.head_backward(&trace, &g_out, &mut grad);

            nn::axpy(1.0, &g_z0[..e], grad.day_embedding.row_mut(ctx.day));
            let g_p = &g_z0[e..2 * e];
            grad.p_weight.add_outer(g_p, &ctx.p.as_array());
            nn::axpy(1.0, g_p, &mut grad.p_bias.data);
            let g_r = &g_z0[2 * e..3 * e];
            grad.rate_weight.add_outer(g_r, &[ctx.total_rate]);
            nn::axpy(1.0, g_r, &mut grad.rate_bias.data);
            let g_d = &g_z0[3 * e..4 * e];
            grad.order_weight
                .add_outer(g_d, &[ctx.initial_order as f64 / self.config.max_lots]);
            nn::axpy(1.0, g_d, &mut grad.order_bias.data);

            for k in r.combination.flagged() {
                let u = slots[&(ctx.day, k)];
                let item = items[u];
                let g_m = match item.modality {
                    Modality::Saliency => &g_z0[4 * e..5 * e],
                    Modality::Text => &g_z0[5 * e..],
                };
                let ci = item.class.index();
                for j in 0..e {
                    d_proj[u][j] += g_m[j] * self.params.class_embedding.row(ci)[j];
                }
                let g_class = grad.class_embedding.row_mut(ci);
                for j in 0..e {
                    g_class[j] += g_m[j] * projections[u][j];
                }
            }
        }

        for (item, dp) in items.iter().zip(&d_proj) {
            let (w, b) = match item.modality {
                Modality::Saliency => (&mut grad.saliency_weight, &mut grad.saliency_bias),
                Modality::Text => (&mut grad.text_weight, &mut grad.text_bias),
            };
            w.add_outer(dp, &item.feature);
            nn::axpy(1.0, dp, &mut b.data);
        }

        loss /= n;
        if l2 > 0.0 {
            for ((_, g), (_, w)) in grad.tensors_mut().into_iter().zip(self.params.tensors()) {
                nn::axpy(l2, &w.data, &mut g.data);
            }
            loss += 0.5 * l2 * self.params.sum_of_squares();
        }
        Ok((loss, grad))
    }
}

/// Context-dependent part of a prediction, reusable across combinations.
pub struct PreparedContext<'a> {
    model: &'a UserModel,
    base: Vec<f64>,
    contributions: Vec<(Modality, Vec<f64>)>,
}

impl PreparedContext<'_> {
    pub fn candidate_count(&self) -> usize {
        self.contributions.len()
    }

    pub fn predict(&self, combination: &ExplanationCombination) -> Result<DecisionPrediction> {
        if combination.len() != self.contributions.len() {
            return Err(Error::Shape(format!(
                "combination over {} items, context prepared for {}",
                combination.len(),
                self.contributions.len()
            )));
        }
        let e = self.model.config.hidden;
        let mut z0 = self.base.clone();
        z0.resize(6 * e, 0.0);
        for k in combination.flagged() {
            let (modality, v) = &self.contributions[k];
            let offset = match modality {
                Modality::Saliency => 4 * e,
                Modality::Text => 5 * e,
            };
            nn::axpy(1.0, v, &mut z0[offset..offset + e]);
        }
        let trace = self.model.head_forward(z0);
        Ok(self.model.to_prediction(&trace.out))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            l2: 1e-4,
            grad_clip: 5.0,
            seed: 11,
        }
    }
}

fn check_records(records: &[InteractionRecord], store: &ExplanationStore, config: &UserModelConfig) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no interaction records".into()));
    }
    for r in records {
        if r.context.day >= config.num_days {
            return Err(Error::Range(format!(
                "record day {} outside embedding table of {}",
                r.context.day, config.num_days
            )));
        }
        r.combination.check_len(store.get(r.context.day)?)?;
        if !r.context.total_rate.is_finite() {
            return Err(Error::Validation("non-finite total rate".into()));
        }
    }
    Ok(())
}

/// Fits the model to `d - d'` with minibatch momentum SGD.
pub fn train_user_model(
    records: &[InteractionRecord],
    store: &ExplanationStore,
    config: UserModelConfig,
    train: &TrainConfig,
) -> Result<UserModel> {
    config.validate()?;
    check_records(records, store, &config)?;
    if train.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut model = UserModel::initialized(config, train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5EED);
    let mut opt = MomentumSgd::new(train.learning_rate, train.momentum);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<&InteractionRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let (_, mut grad) = model.batch_loss_and_gradient(&batch, store, train.l2)?;
            if train.grad_clip > 0.0 {
                nn::clip_gradients(&mut grad, train.grad_clip);
            }
            opt.step(&mut model.params, &grad);
        }
    }

    if matches!(model.config.head, OutputHead::Regression) {
        let trained = model.loss(records, store, 0.0)?;
        let zero = records
            .iter()
            .map(|r| 0.5 * (r.delta() as f64).powi(2))
            .sum::<f64>()
            / records.len() as f64;
        if !model.params.all_finite() || !(trained <= zero) {
            log::warn!("user model ({trained}) did not beat the zero predictor ({zero}); zeroing output");
            model.params.out_weight.data.fill(0.0);
            model.params.out_bias.data.fill(0.0);
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub pearson: f64,
    pub test_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldScore>,
    pub mean: f64,
    pub sd: f64,
}

/// Fold index per record. Whole sessions go to one fold.
pub fn assign_folds(records: &[InteractionRecord], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config("cross validation needs k >= 2".into()));
    }
    let mut sessions: Vec<&str> = records.iter().map(|r| r.session_id.as_str()).collect();
    sessions.sort_unstable();
    sessions.dedup();
    if sessions.len() < k {
        return Err(Error::Config(format!(
            "{} sessions cannot fill {k} folds",
            sessions.len()
        )));
    }
    sessions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: BTreeMap<&str, usize> = sessions.iter().enumerate().map(|(i, s)| (*s, i % k)).collect();
    Ok(records.iter().map(|r| fold_of[r.session_id.as_str()]).collect())
}

/// k-fold evaluation with an arbitrary learner: `fit_predict(train, test)`
/// returns one predicted delta per test record.
pub fn cross_validate_with<F>(records: &[InteractionRecord], k: usize, seed: u64, mut fit_predict: F) -> Result<CrossValidation>
where
    F: FnMut(&[InteractionRecord], &[InteractionRecord]) -> Result<Vec<f64>>,
{
    let folds = assign_folds(records, k, seed)?;
    let mut scores = Vec::with_capacity(k);
    for fold in 0..k {
        let (test, train): (Vec<_>, Vec<_>) = records
            .iter()
            .zip(&folds)
            .partition(|(_, f)| **f == fold);
        let test: Vec<InteractionRecord> = test.into_iter().map(|(r, _)| r.clone()).collect();
        let train: Vec<InteractionRecord> = train.into_iter().map(|(r, _)| r.clone()).collect();
        let preds = fit_predict(&train, &test)?;
        if preds.len() != test.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} held-out records",
                preds.len(),
                test.len()
            )));
        }
        let actual: Vec<f64> = test.iter().map(|r| r.delta() as f64).collect();
        scores.push(FoldScore {
            fold,
            pearson: stats::pearson(&preds, &actual),
            test_records: test.len(),
        });
    }
    let rs: Vec<f64> = scores.iter().map(|s| s.pearson).collect();
    Ok(CrossValidation {
        mean: stats::mean(&rs),
        sd: stats::sample_sd(&rs),
        folds: scores,
    })
}

pub fn cross_validate(
    records: &[InteractionRecord],
    store: &ExplanationStore,
    config: UserModelConfig,
    train: &TrainConfig,
    k: usize,
) -> Result<CrossValidation> {
    cross_validate_with(records, k, train.seed, |tr, te| {
        let model = train_user_model(tr, store, config, train)?;
        te.iter()
            .map(|r| {
                let cands = store.get(r.context.day)?;
                Ok(model.predict_decision(&r.context, cands, &r.combination)?.predicted_delta)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explanations::{ExplanationItem, Payload};
    use crate::market::PriceClass;
    use rand::Rng;

    const DIM: usize = 8;

    fn item(day: usize, k: usize, class: PriceClass, modality: Modality, rng: &mut ChaCha8Rng) -> ExplanationItem {
        ExplanationItem {
            id: format!("d{day}-{k}"),
            day,
            class,
            modality,
            payload: Payload::Text(format!("item {k}")),
            feature: (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn store(days: usize, seed: u64) -> ExplanationStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for day in 0..days {
            let mut items = Vec::new();
            for (k, class) in PriceClass::ALL.into_iter().enumerate() {
                items.push(item(day, k, class, Modality::Saliency, &mut rng));
                items.push(item(day, 3 + 2 * k, class, Modality::Text, &mut rng));
                items.push(item(day, 4 + 2 * k, class, Modality::Text, &mut rng));
            }
            out.push(DayCandidates::new(day, items).unwrap());
        }
        ExplanationStore::from_candidates(out, ".".into(), DIM).unwrap()
    }

    fn config(days: usize) -> UserModelConfig {
        UserModelConfig {
            hidden: 6,
            ..UserModelConfig::new(days, DIM)
        }
    }

    fn context(day: usize, initial_order: i64) -> DecisionContext {
        DecisionContext {
            day,
            p: PredictionDistribution::new(0.5, 0.3, 0.2).unwrap(),
            total_rate: 0.01,
            initial_order,
        }
    }

    fn records(store: &ExplanationStore, n: usize, seed: u64) -> Vec<InteractionRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let days = store.days().len();
        (0..n)
            .map(|i| {
                let day = rng.random_range(0..days);
                let mask = rng.random_range(0..512u32);
                let combination = ExplanationCombination::new(mask, 9).unwrap();
                let cands = store.get(day).unwrap();
                let push: i64 = combination
                    .flagged()
                    .map(|k| cands.items()[k].class.sign() as i64)
                    .sum();
                let initial = rng.random_range(-3..=3);
                InteractionRecord {
                    session_id: format!("s{}", i % 8),
                    timestamp: i as i64,
                    context: context(day, initial),
                    combination,
                    final_order: initial + push,
                }
            })
            .collect()
    }

    #[test]
    fn unflagged_items_do_not_matter() {
        let s = store(2, 1);
        let model = UserModel::initialized(config(2), 3).unwrap();
        let cands = s.get(0).unwrap();
        let combo = ExplanationCombination::new(0b000_100_101, 9).unwrap();
        let base = model.predict_decision(&context(0, 1), cands, &combo).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut items = cands.items().to_vec();
            for (k, it) in items.iter_mut().enumerate() {
                if !combo.is_flagged(k) {
                    it.feature.iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0));
                    it.class = PriceClass::ALL[rng.random_range(0..3)];
                }
            }
            // Class changes can reorder items; keep positions fixed by
            // rebuilding from the canonical order of the flagged ones.
            let perturbed = DayCandidates::new(0, items).unwrap();
            let flags: Vec<bool> = perturbed
                .items()
                .iter()
                .map(|it| combo.flagged().any(|k| cands.items()[k].id == it.id))
                .collect();
            let combo2 = ExplanationCombination::from_flags(&flags).unwrap();
            let out = model.predict_decision(&context(0, 1), &perturbed, &combo2).unwrap();
            assert_eq!(out.predicted_delta.to_bits(), base.predicted_delta.to_bits());
        }
    }

    #[test]
    fn aggregation_is_additive_over_items() {
        let s = store(1, 2);
        let model = UserModel::initialized(config(1), 4).unwrap();
        let cands = s.get(0).unwrap();
        let all = model
            .aggregate_explanations(cands, &ExplanationCombination::full(9))
            .unwrap();
        let mut sal = vec![0.0; 6];
        let mut text = vec![0.0; 6];
        for k in 0..9 {
            let (a, b) = model
                .aggregate_explanations(cands, &ExplanationCombination::new(1 << k, 9).unwrap())
                .unwrap();
            nn::axpy(1.0, &a, &mut sal);
            nn::axpy(1.0, &b, &mut text);
        }
        for (x, y) in all.0.iter().zip(&sal).chain(all.1.iter().zip(&text)) {
            assert!((x - y).abs() < 1e-12);
        }
        let (a, b) = model
            .aggregate_explanations(cands, &ExplanationCombination::empty(9))
            .unwrap();
        assert!(a.iter().chain(&b).all(|v| *v == 0.0));
    }

    #[test]
    fn prepared_and_direct_predictions_agree() {
        let s = store(2, 5);
        let model = UserModel::initialized(config(2), 6).unwrap();
        let cands = s.get(1).unwrap();
        let ctx = context(1, -2);
        let prepared = model.prepare(&ctx, cands).unwrap();
        for mask in [0, 1, 77, 300, 511] {
            let c = ExplanationCombination::new(mask, 9).unwrap();
            let a = prepared.predict(&c).unwrap().predicted_delta;
            let b = model.predict_decision(&ctx, cands, &c).unwrap().predicted_delta;
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn day_outside_table_is_range_error() {
        let s = store(3, 1);
        let model = UserModel::initialized(config(2), 1).unwrap();
        let err = model
            .predict_decision(&context(2, 0), s.get(2).unwrap(), &ExplanationCombination::empty(9))
            .unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn categorical_expectation_matches_distribution() {
        let s = store(1, 3);
        let cfg = UserModelConfig {
            head: OutputHead::default_categorical(),
            ..config(1)
        };
        let model = UserModel::initialized(cfg, 2).unwrap();
        let out = model
            .predict_decision(&context(0, 0), s.get(0).unwrap(), &ExplanationCombination::full(9))
            .unwrap();
        let dist = out.distribution.unwrap();
        assert_eq!(dist.len(), 11);
        assert!((dist.iter().map(|(_, q)| q).sum::<f64>() - 1.0).abs() < 1e-12);
        let e: f64 = dist.iter().map(|(d, q)| *d as f64 * q).sum();
        assert!((e - out.predicted_delta).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = store(3, 7);
        let recs = records(&s, 12, 8);
        for head in [OutputHead::Regression, OutputHead::default_categorical()] {
            let cfg = UserModelConfig { head, ..config(3) };
            let model = UserModel::initialized(cfg, 10).unwrap();
            let (_, grad) = model.loss_and_gradient(&recs, &s, 1e-3).unwrap();
            let err = nn::gradient_check(&model.params, &grad, 6, 1e-5, 1e-7, |p| {
                UserModel::new(cfg, p.clone()).unwrap().loss(&recs, &s, 1e-3).unwrap()
            });
            assert!(err < 1e-4, "{head:?}: {err}");
        }
    }

    #[test]
    fn learns_class_sign_rule() {
        let s = store(4, 11);
        let recs = records(&s, 300, 12);
        let train = TrainConfig {
            epochs: 150,
            ..TrainConfig::default()
        };
        let model = train_user_model(&recs, &s, config(4), &train).unwrap();
        let preds: Vec<f64> = recs
            .iter()
            .map(|r| {
                model
                    .predict_decision(&r.context, s.get(r.context.day).unwrap(), &r.combination)
                    .unwrap()
                    .predicted_delta
            })
            .collect();
        let actual: Vec<f64> = recs.iter().map(|r| r.delta() as f64).collect();
        assert!(stats::pearson(&preds, &actual) > 0.8);
    }

    #[test]
    fn training_is_deterministic() {
        let s = store(2, 1);
        let recs = records(&s, 40, 2);
        let train = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train_user_model(&recs, &s, config(2), &train).unwrap();
        let b = train_user_model(&recs, &s, config(2), &train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("um.json");
        let model = UserModel::initialized(config(2), 3).unwrap();
        model.save(&path).unwrap();
        assert_eq!(UserModel::load(&path).unwrap(), model);
    }

    #[test]
    fn jsonl_round_trip() {
        let s = store(2, 1);
        let recs = records(&s, 5, 1);
        let mut buf = Vec::new();
        write_jsonl(&recs, &mut buf).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn folds_keep_sessions_together() {
        let s = store(2, 1);
        let recs = records(&s, 64, 3);
        let folds = assign_folds(&recs, 4, 9).unwrap();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (r, f) in recs.iter().zip(&folds) {
            assert_eq!(*seen.entry(&r.session_id).or_insert(*f), *f);
        }
        assert!((0..4).all(|f| folds.contains(&f)));
        assert!(assign_folds(&recs, 9, 1).is_err());
    }

    #[test]
    fn cross_validation_with_oracle_learner_is_perfect() {
        let s = store(2, 1);
        let recs = records(&s, 64, 3);
        let cv = cross_validate_with(&recs, 4, 1, |_, test| Ok(test.iter().map(|r| r.delta() as f64).collect())).unwrap();
        assert_eq!(cv.folds.len(), 4);
        assert!((cv.mean - 1.0).abs() < 1e-12);
    }
}
