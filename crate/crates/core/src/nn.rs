//! Minimal dense-network building blocks shared by the predictor and the
//! user model: a row-major matrix, a few activations, momentum SGD and the
//! on-disk weight container.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix. Vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        Matrix::zeros(self.rows, self.cols)
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * x + bias`.
    pub fn affine(&self, x: &[f64], bias: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = bias[r] + dot(self.row(r), x);
        }
    }

    /// `out += self^T * g`.
    pub fn add_transpose_mul(&self, g: &[f64], out: &mut [f64]) {
        for (r, &gr) in g.iter().enumerate() {
            if gr != 0.0 {
                axpy(gr, self.row(r), out);
            }
        }
    }

    /// `self += g x^T`.
    pub fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        for (r, &gr) in g.iter().enumerate() {
            if gr != 0.0 {
                axpy(gr, x, self.row_mut(r));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A set of named tensors that can be optimised, checked and serialised.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    fn scale(&mut self, factor: f64) {
        for (_, m) in self.tensors_mut() {
            m.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn sum_of_squares(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, m)| m.data.iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Gradient descent with classical momentum.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        MomentumSgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, m)| vec![0.0; m.data.len()]).collect();
        }
        for (((_, p), (_, g)), v) in params.iter_mut().zip(&grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.iter_mut()) {
                *vi = self.momentum * *vi - self.learning_rate * gi;
                *pi += *vi;
            }
        }
    }
}

/// Clips the global L2 norm of `grads` to `max_norm`.
pub fn clip_gradients<P: ParamSet>(grads: &mut P, max_norm: f64) {
    let norm = grads.sum_of_squares().sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
}

pub const WEIGHT_FORMAT: &str = "xselector-weights";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

/// JSON weight container: a shape header followed by flat row-major data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightFile<C> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: C,
    pub shapes: BTreeMap<String, [usize; 2]>,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl<C: Serialize + DeserializeOwned> WeightFile<C> {
    pub fn from_params<P: ParamSet>(kind: &str, config: C, params: &P) -> Self {
        let mut shapes = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        for (name, m) in params.tensors() {
            shapes.insert(name.to_string(), m.shape());
            tensors.insert(name.to_string(), m.data.clone());
        }
        WeightFile {
            format: WEIGHT_FORMAT.to_string(),
            version: WEIGHT_FORMAT_VERSION,
            kind: kind.to_string(),
            config,
            shapes,
            tensors,
        }
    }

    /// Copies tensors into `params`, which must already have the right shapes.
    pub fn fill_params<P: ParamSet>(&self, kind: &str, params: &mut P) -> Result<()> {
        if self.format != WEIGHT_FORMAT || self.version != WEIGHT_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported weight format {} v{}",
                self.format, self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Validation(format!(
                "weight file holds `{}`, expected `{kind}`",
                self.kind
            )));
        }
        let mut seen = 0;
        for (name, m) in params.tensors_mut() {
            let shape = self
                .shapes
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))?;
            let data = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing data for `{name}`")))?;
            if *shape != m.shape() || data.len() != m.data.len() {
                return Err(Error::Shape(format!(
                    "`{name}`: file has {shape:?} ({} values), model expects {:?}",
                    data.len(),
                    m.shape()
                )));
            }
            m.data.copy_from_slice(data);
            seen += 1;
        }
        if seen != self.tensors.len() {
            return Err(Error::Shape(format!(
                "file has {} tensors, model uses {seen}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Largest relative error between `analytic` and central finite differences
/// of `loss` over up to `per_tensor` coordinates of each tensor. Relative
/// error is `|a - n| / max(|a| + |n|, floor)`.
pub fn gradient_check<P, F>(params: &P, analytic: &P, per_tensor: usize, step: f64, floor: f64, mut loss: F) -> f64
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> f64,
{
    let mut worst = 0.0f64;
    let grads = analytic.tensors();
    let count = params.tensors().len();
    for t in 0..count {
        let len = params.tensors()[t].1.data.len();
        let stride = (len / per_tensor.max(1)).max(1);
        for i in (0..len).step_by(stride).take(per_tensor) {
            let mut plus = params.clone();
            plus.tensors_mut()[t].1.data[i] += step;
            let mut minus = params.clone();
            minus.tensors_mut()[t].1.data[i] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let a = grads[t].1.data[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
