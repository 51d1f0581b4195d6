//! Stock-movement predictor: a three-class probability distribution over
//! BULL / NEUTRAL / BEAR for the five-day forward average.
//!
//! The model is a one-hidden-layer tanh network over engineered,
//! scale-invariant window features. Externally computed predictions can be
//! loaded instead through [`load_predictions_csv`].

use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{PriceClass, PriceSeries, LABEL_HORIZON, LABEL_THRESHOLD};
use crate::nn::{self, Matrix, MomentumSgd, ParamSet, WeightFile};

pub const DEFAULT_WINDOW: usize = 30;
pub const DEFAULT_SCENARIO_WINDOW: usize = 60;

const SUM_TOLERANCE: f64 = 1e-9;
const MA_PERIODS: [usize; 3] = [5, 10, 20];

/// Probabilities of BULL, NEUTRAL and BEAR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPrediction", into = "RawPrediction")]
pub struct PredictionDistribution {
    bull: f64,
    neutral: f64,
    bear: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPrediction {
    p_bull: f64,
    p_neutral: f64,
    p_bear: f64,
}

impl TryFrom<RawPrediction> for PredictionDistribution {
    type Error = Error;

    fn try_from(raw: RawPrediction) -> Result<Self> {
        PredictionDistribution::new(raw.p_bull, raw.p_neutral, raw.p_bear)
    }
}

impl From<PredictionDistribution> for RawPrediction {
    fn from(p: PredictionDistribution) -> Self {
        RawPrediction {
            p_bull: p.bull,
            p_neutral: p.neutral,
            p_bear: p.bear,
        }
    }
}

impl PredictionDistribution {
    pub fn new(bull: f64, neutral: f64, bear: f64) -> Result<Self> {
        let probs = [bull, neutral, bear];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation(format!(
                "probabilities {probs:?} must lie in [0, 1]"
            )));
        }
        let sum = bull + neutral + bear;
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Validation(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(PredictionDistribution {
            bull,
            neutral,
            bear,
        })
    }

    pub fn uniform() -> Self {
        PredictionDistribution {
            bull: 1.0 / 3.0,
            neutral: 1.0 / 3.0,
            bear: 1.0 / 3.0,
        }
    }

    pub fn one_hot(class: PriceClass) -> Self {
        let mut p = [0.0; 3];
        p[class.index()] = 1.0;
        PredictionDistribution {
            bull: p[0],
            neutral: p[1],
            bear: p[2],
        }
    }

    fn from_softmax(p: &[f64]) -> Self {
        PredictionDistribution {
            bull: p[0],
            neutral: p[1],
            bear: p[2],
        }
    }

    pub fn bull(&self) -> f64 {
        self.bull
    }

    pub fn neutral(&self) -> f64 {
        self.neutral
    }

    pub fn bear(&self) -> f64 {
        self.bear
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.bull, self.neutral, self.bear]
    }

    pub fn prob(&self, class: PriceClass) -> f64 {
        self.as_array()[class.index()]
    }

    /// Most probable class; ties go BULL, then NEUTRAL, then BEAR.
    pub fn argmax(&self) -> PriceClass {
        PriceClass::from_index(nn::argmax(&self.as_array())).expect("three classes")
    }

    /// Expected movement with class values +1 / 0 / -1.
    pub fn expected_value(&self) -> f64 {
        self.bull - self.bear
    }
}

/// Engineered features over the trailing window before a trading day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureWindow(pub Vec<f64>);

impl FeatureWindow {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn feature_len(window: usize) -> usize {
    3 * window + MA_PERIODS.len()
}

/// Features visible at the open of `day`, built only from bars before `day`
/// plus the day's opening price:
///
/// * `window` close-to-close log returns, the last being the overnight gap
///   `ln(open[day] / close[day-1])`;
/// * `window` log high/low ranges;
/// * `window - 1` log volume changes;
/// * log gaps between the open and the 5/10/20/`window`-day close averages.
pub fn featurize(series: &PriceSeries, day: usize, window: usize) -> Result<FeatureWindow> {
    if window < 2 {
        return Err(Error::Config("feature window must be at least 2".into()));
    }
    if day < window || day >= series.len() {
        return Err(Error::Range(format!(
            "day {day} needs {window} bars of history within a series of {}",
            series.len()
        )));
    }
    let bars = series.bars();
    let hist = &bars[day - window..day];
    let open = bars[day].open;
    let mut f = Vec::with_capacity(feature_len(window));

    for pair in hist.windows(2) {
        f.push((pair[1].close / pair[0].close).ln());
    }
    f.push((open / hist[window - 1].close).ln());

    f.extend(hist.iter().map(|b| (b.high / b.low).ln()));

    for pair in hist.windows(2) {
        f.push(((pair[1].volume + 1.0) / (pair[0].volume + 1.0)).ln());
    }

    for period in MA_PERIODS.iter().copied().chain(std::iter::once(window)) {
        let k = period.min(window);
        let ma = hist[window - k..].iter().map(|b| b.close).sum::<f64>() / k as f64;
        f.push((open / ma).ln());
    }
    debug_assert_eq!(f.len(), feature_len(window));
    Ok(FeatureWindow(f))
}

/// Trainable weights of the predictor network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorNet {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl PredictorNet {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        PredictorNet {
            w1: Matrix::zeros(hidden, inputs),
            b1: Matrix::zeros(hidden, 1),
            w2: Matrix::zeros(3, hidden),
            b2: Matrix::zeros(3, 1),
        }
    }
}

impl ParamSet for PredictorNet {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub window: usize,
    pub hidden: usize,
    /// Per-feature standardisation applied before the network.
    pub feature_mean: Matrix,
    pub feature_scale: Matrix,
    pub net: PredictorNet,
}

impl ParamSet for PredictorParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut t = vec![
            ("feature_mean", &self.feature_mean),
            ("feature_scale", &self.feature_scale),
        ];
        t.extend(self.net.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut t = vec![
            ("feature_mean", &mut self.feature_mean),
            ("feature_scale", &mut self.feature_scale),
        ];
        t.extend(self.net.tensors_mut());
        t
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct PredictorShape {
    window: usize,
    hidden: usize,
}

const WEIGHT_KIND: &str = "predictor";

impl PredictorParams {
    /// All-zero network with identity standardisation: predicts uniform.
    pub fn zeros(window: usize, hidden: usize) -> Self {
        let d = feature_len(window);
        PredictorParams {
            window,
            hidden,
            feature_mean: Matrix::zeros(1, d),
            feature_scale: Matrix::filled(1, d, 1.0),
            net: PredictorNet::zeros(d, hidden),
        }
    }

    pub fn input_len(&self) -> usize {
        self.feature_mean.cols
    }

    fn standardize(&self, fw: &FeatureWindow) -> Vec<f64> {
        fw.0.iter()
            .zip(&self.feature_mean.data)
            .zip(&self.feature_scale.data)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let shape = PredictorShape {
            window: self.window,
            hidden: self.hidden,
        };
        WeightFile::from_params(WEIGHT_KIND, shape, self).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: WeightFile<PredictorShape> = WeightFile::load(path)?;
        let mut params = PredictorParams::zeros(file.config.window, file.config.hidden);
        file.fill_params(WEIGHT_KIND, &mut params)?;
        Ok(params)
    }
}

struct Forward {
    x: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn forward(params: &PredictorParams, fw: &FeatureWindow) -> Result<Forward> {
    if fw.len() != params.input_len() {
        return Err(Error::Shape(format!(
            "feature window has {} entries, model expects {}",
            fw.len(),
            params.input_len()
        )));
    }
    let x = params.standardize(fw);
    let net = &params.net;
    let mut hidden = vec![0.0; net.w1.rows];
    net.w1.affine(&x, &net.b1.data, &mut hidden);
    hidden.iter_mut().for_each(|h| *h = h.tanh());
    let mut logits = [0.0; 3];
    net.w2.affine(&hidden, &net.b2.data, &mut logits);
    Ok(Forward {
        x,
        hidden,
        probs: nn::softmax(&logits),
    })
}

pub fn predict(params: &PredictorParams, fw: &FeatureWindow) -> Result<PredictionDistribution> {
    Ok(PredictionDistribution::from_softmax(&forward(params, fw)?.probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorHyperparams {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for PredictorHyperparams {
    fn default() -> Self {
        PredictorHyperparams {
            hidden: 16,
            epochs: 60,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            l2: 1e-4,
            seed: 7,
        }
    }
}

/// Mean cross-entropy of `batch` plus `0.5 * l2 * |w|^2`, and its gradient
/// with respect to the network weights.
pub fn loss_and_gradient(
    params: &PredictorParams,
    batch: &[(FeatureWindow, PriceClass)],
    l2: f64,
) -> Result<(f64, PredictorNet)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("gradient of an empty batch".into()));
    }
    let net = &params.net;
    let mut grad = PredictorNet::zeros(net.w1.cols, net.w1.rows);
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for (fw, label) in batch {
        let fwd = forward(params, fw)?;
        let y = label.index();
        loss -= fwd.probs[y].max(1e-300).ln();
        let mut dlogits = fwd.probs.clone();
        dlogits[y] -= 1.0;
        dlogits.iter_mut().for_each(|d| *d /= n);
        grad.w2.add_outer(&dlogits, &fwd.hidden);
        nn::axpy(1.0, &dlogits, &mut grad.b2.data);
        let mut dh = vec![0.0; fwd.hidden.len()];
        net.w2.add_transpose_mul(&dlogits, &mut dh);
        for (d, h) in dh.iter_mut().zip(&fwd.hidden) {
            *d *= 1.0 - h * h;
        }
        grad.w1.add_outer(&dh, &fwd.x);
        nn::axpy(1.0, &dh, &mut grad.b1.data);
    }
    loss /= n;
    if l2 > 0.0 {
        for ((_, g), (_, w)) in grad.tensors_mut().into_iter().zip(net.tensors()) {
            nn::axpy(l2, &w.data, &mut g.data);
        }
        loss += 0.5 * l2 * net.sum_of_squares();
    }
    Ok((loss, grad))
}

/// Mean cross-entropy without regularisation.
pub fn cross_entropy(params: &PredictorParams, data: &[(FeatureWindow, PriceClass)]) -> Result<f64> {
    Ok(loss_and_gradient(params, data, 0.0)?.0)
}

pub fn train_predictor(
    dataset: &[(FeatureWindow, PriceClass)],
    hp: &PredictorHyperparams,
) -> Result<PredictorParams> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::EmptyDataset("predictor training set".into()))?;
    let d = first.0.len();
    if dataset.iter().any(|(fw, _)| fw.len() != d) {
        return Err(Error::Shape("feature windows differ in length".into()));
    }
    if hp.batch_size == 0 || hp.hidden == 0 {
        return Err(Error::Config("batch size and hidden width must be positive".into()));
    }
    let window = d.saturating_sub(MA_PERIODS.len()) / 3;
    if feature_len(window) != d {
        return Err(Error::Shape(format!("{d} features do not match any window")));
    }
    let distinct = {
        let mut seen = [false; 3];
        dataset.iter().for_each(|(_, c)| seen[c.index()] = true);
        seen.iter().filter(|s| **s).count()
    };
    if distinct < 2 {
        log::warn!("predictor training set has a single class; model will be near-constant");
    }

    let mut params = PredictorParams::zeros(window, hp.hidden);
    let n = dataset.len() as f64;
    for j in 0..d {
        let mean = dataset.iter().map(|(fw, _)| fw.0[j]).sum::<f64>() / n;
        let var = dataset.iter().map(|(fw, _)| (fw.0[j] - mean).powi(2)).sum::<f64>() / n;
        params.feature_mean.data[j] = mean;
        params.feature_scale.data[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    params.net.w1 = Matrix::uniform(hp.hidden, d, 1.0 / (d as f64).sqrt(), &mut rng);
    params.net.w2 = Matrix::uniform(3, hp.hidden, 1.0 / (hp.hidden as f64).sqrt(), &mut rng);

    let mut opt = MomentumSgd::new(hp.learning_rate, hp.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch = Vec::with_capacity(hp.batch_size);
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let (_, mut grad) = loss_and_gradient(&params, &batch, hp.l2)?;
            nn::clip_gradients(&mut grad, 5.0);
            opt.step(&mut params.net, &grad);
        }
    }

    let trained = cross_entropy(&params, dataset)?;
    if !params.all_finite() || !(trained <= 3f64.ln()) {
        log::warn!("predictor training did not beat the uniform model (CE {trained}); using uniform");
        params.net = PredictorNet::zeros(d, hp.hidden);
    }
    Ok(params)
}

/// One labelled trading day for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDay {
    pub day: usize,
    pub features: FeatureWindow,
    pub label: PriceClass,
    /// Forward ratio behind the label.
    pub ratio: f64,
}

/// Every day of `series` with both a full feature window and a full label
/// horizon.
pub fn labeled_days(series: &PriceSeries, window: usize) -> Result<Vec<LabeledDay>> {
    if series.len() <= window + LABEL_HORIZON {
        return Err(Error::Range(format!(
            "series of {} bars has no labelled day for window {window}",
            series.len()
        )));
    }
    (window..series.len() - LABEL_HORIZON)
        .map(|day| {
            let ratio = series.forward_ratio(day, LABEL_HORIZON)?;
            Ok(LabeledDay {
                day,
                features: featurize(series, day, window)?,
                label: PriceClass::from_ratio(ratio, LABEL_THRESHOLD),
                ratio,
            })
        })
        .collect()
}

pub fn three_class_accuracy_of(preds: &[PredictionDistribution], labels: &[PriceClass]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::EmptyDataset(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p.argmax() == **l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Agreement of `sign(p_bull - p_bear)` with the sign of the realised ratio,
/// skipping days where either sign is zero.
pub fn binary_sign_accuracy_of(preds: &[PredictionDistribution], ratios: &[f64]) -> Result<f64> {
    if preds.len() != ratios.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ratios",
            preds.len(),
            ratios.len()
        )));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, r) in preds.iter().zip(ratios) {
        let ps = sign(p.expected_value());
        let rs = sign(*r);
        if ps == 0 || rs == 0 {
            continue;
        }
        total += 1;
        if ps == rs {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset("no day with a non-zero sign".into()));
    }
    Ok(hits as f64 / total as f64)
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn predict_all(params: &PredictorParams, eval: &[LabeledDay]) -> Result<Vec<PredictionDistribution>> {
    eval.iter().map(|d| predict(params, &d.features)).collect()
}

pub fn three_class_accuracy(params: &PredictorParams, eval: &[LabeledDay]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let labels: Vec<_> = eval.iter().map(|d| d.label).collect();
    three_class_accuracy_of(&predict_all(params, eval)?, &labels)
}

pub fn binary_sign_accuracy(params: &PredictorParams, eval: &[LabeledDay]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let ratios: Vec<_> = eval.iter().map(|d| d.ratio).collect();
    binary_sign_accuracy_of(&predict_all(params, eval)?, &ratios)
}

/// High- and low-accuracy trading windows (absolute day ranges).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSelection {
    pub high: Range<usize>,
    pub high_accuracy: f64,
    pub low: Range<usize>,
    pub low_accuracy: f64,
}

/// Picks the window with the highest moving-average accuracy, then the
/// non-overlapping window whose accuracy is closest to chance (1/3). Ties go
/// to the earliest window. `hits[k]` is whether the prediction for day
/// `first_day + k` was correct.
pub fn select_scenarios_from_hits(
    first_day: usize,
    hits: &[bool],
    window: usize,
) -> Result<ScenarioSelection> {
    if window == 0 || hits.len() < 2 * window {
        return Err(Error::Range(format!(
            "{} labelled days cannot hold two disjoint windows of {window}",
            hits.len()
        )));
    }
    let mut counts = Vec::with_capacity(hits.len() - window + 1);
    let mut c = hits[..window].iter().filter(|h| **h).count();
    counts.push(c);
    for s in 1..=hits.len() - window {
        c = c + hits[s + window - 1] as usize - hits[s - 1] as usize;
        counts.push(c);
    }
    let mut high = 0;
    for (s, &c) in counts.iter().enumerate() {
        if c > counts[high] {
            high = s;
        }
    }
    // |c/window - 1/3| compared exactly as |3c - window|.
    let chance_gap = |c: usize| (3 * c).abs_diff(window);
    let low = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| s.abs_diff(high) >= window)
        .min_by_key(|(s, &c)| (chance_gap(c), *s))
        .map(|(s, _)| s)
        .ok_or_else(|| Error::Range("no low-accuracy window disjoint from the high one".into()))?;
    Ok(ScenarioSelection {
        high: first_day + high..first_day + high + window,
        high_accuracy: counts[high] as f64 / window as f64,
        low: first_day + low..first_day + low + window,
        low_accuracy: counts[low] as f64 / window as f64,
    })
}

/// `preds[k]` and `labels[k]` belong to day `first_day + k`.
pub fn select_scenarios_from_predictions(
    first_day: usize,
    preds: &[PredictionDistribution],
    labels: &[PriceClass],
    window: usize,
) -> Result<ScenarioSelection> {
    if preds.len() != labels.len() {
        return Err(Error::Shape("predictions and labels differ in length".into()));
    }
    let hits: Vec<bool> = preds.iter().zip(labels).map(|(p, l)| p.argmax() == *l).collect();
    select_scenarios_from_hits(first_day, &hits, window)
}

pub fn select_scenarios(
    params: &PredictorParams,
    series: &PriceSeries,
    window: usize,
) -> Result<ScenarioSelection> {
    let days = labeled_days(series, params.window)?;
    let preds = predict_all(params, &days)?;
    let labels: Vec<_> = days.iter().map(|d| d.label).collect();
    select_scenarios_from_predictions(days[0].day, &preds, &labels, window)
}

/// Per-day predictions aligned to a price series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyPredictions {
    by_day: Vec<Option<PredictionDistribution>>,
}

impl DailyPredictions {
    pub fn from_model(params: &PredictorParams, series: &PriceSeries) -> Result<Self> {
        let mut by_day = vec![None; series.len()];
        for (day, slot) in by_day.iter_mut().enumerate().skip(params.window) {
            *slot = Some(predict(params, &featurize(series, day, params.window)?)?);
        }
        Ok(DailyPredictions { by_day })
    }

    pub fn from_dated(series: &PriceSeries, rows: &[(NaiveDate, PredictionDistribution)]) -> Result<Self> {
        let mut by_day = vec![None; series.len()];
        for (date, p) in rows {
            let day = series.index_of(*date).ok_or_else(|| {
                Error::Validation(format!("prediction date {date} not in series {}", series.code()))
            })?;
            by_day[day] = Some(*p);
        }
        Ok(DailyPredictions { by_day })
    }

    pub fn from_vec(by_day: Vec<Option<PredictionDistribution>>) -> Self {
        DailyPredictions { by_day }
    }

    pub fn get(&self, day: usize) -> Result<PredictionDistribution> {
        self.by_day
            .get(day)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Range(format!("no prediction for day {day}")))
    }

    pub fn len(&self) -> usize {
        self.by_day.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_day.is_empty()
    }

    pub fn to_dated(&self, series: &PriceSeries) -> Vec<(NaiveDate, PredictionDistribution)> {
        self.by_day
            .iter()
            .enumerate()
            .filter_map(|(d, p)| p.map(|p| (series.bars()[d].date, p)))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    date: NaiveDate,
    p_bull: f64,
    p_neutral: f64,
    p_bear: f64,
}

/// Reads `date,p_bull,p_neutral,p_bear`. Rows whose probabilities sum to 1
/// within 1e-6 (rounded exports) are renormalised.
pub fn load_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<(NaiveDate, PredictionDistribution)>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let line = i + 2;
        let perr = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let row = row.map_err(|e| perr(e.to_string()))?;
        let sum = row.p_bull + row.p_neutral + row.p_bear;
        if (sum - 1.0).abs() > 1e-6 {
            return Err(perr(format!("probabilities sum to {sum}")));
        }
        let norm = if (sum - 1.0).abs() <= SUM_TOLERANCE { 1.0 } else { sum };
        let p = PredictionDistribution::new(row.p_bull / norm, row.p_neutral / norm, row.p_bear / norm)
            .map_err(|e| perr(e.to_string()))?;
        out.push((row.date, p));
    }
    Ok(out)
}

pub fn write_predictions_csv(
    rows: &[(NaiveDate, PredictionDistribution)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["date", "p_bull", "p_neutral", "p_bear"])?;
    for (date, p) in rows {
        wtr.write_record([
            date.to_string(),
            p.bull.to_string(),
            p.neutral.to_string(),
            p.bear.to_string(),
        ])?;
    }
    wtr.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}
