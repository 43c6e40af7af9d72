//! Differentiable loss models trained by the simulated clients.

use std::fmt::Debug;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::rng::Stream;

pub trait LossModel: Debug + Send + Sync {
    fn parameter_count(&self) -> usize;

    /// Input feature dimension the model expects.
    fn input_dim(&self) -> usize;

    fn init_params(&self, rng: &mut Stream) -> ParamVector;

    fn loss(&self, params: &[f64], x: &[f64], y: usize) -> f64;

    /// Mean gradient of the loss over `batch` (indices into `data`), written to `grad`.
    fn gradient(&self, params: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]);

    fn mean_loss(&self, params: &[f64], data: &Dataset) -> f64 {
        let total: f64 = (0..data.len()).map(|i| self.loss(params, data.features(i), data.label(i))).sum();
        total / data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `½‖w − x‖²`; labels are ignored.
    Quadratic { dim: usize },
    /// Multinomial logistic regression.
    Logistic { inputs: usize, classes: usize },
    /// One tanh hidden layer followed by a softmax output layer.
    Mlp { inputs: usize, hidden: usize, classes: usize },
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn LossModel>> {
        match *self {
            ModelSpec::Quadratic { dim } if dim > 0 => Ok(Box::new(Quadratic { dim })),
            ModelSpec::Logistic { inputs, classes } if inputs > 0 && classes >= 2 => {
                Ok(Box::new(Logistic { inputs, classes }))
            }
            ModelSpec::Mlp { inputs, hidden, classes } if inputs > 0 && hidden > 0 && classes >= 2 => {
                Ok(Box::new(Mlp { inputs, hidden, classes }))
            }
            other => Err(Error::config(format!("invalid model dimensions: {other:?}"))),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match *self {
            ModelSpec::Quadratic { dim } => dim,
            ModelSpec::Logistic { inputs, classes } => classes * (inputs + 1),
            ModelSpec::Mlp { inputs, hidden, classes } => hidden * (inputs + 1) + classes * (hidden + 1),
        }
    }

    /// Number of output classes, if the model is a classifier.
    pub fn classes(&self) -> Option<usize> {
        match *self {
            ModelSpec::Quadratic { .. } => None,
            ModelSpec::Logistic { classes, .. } | ModelSpec::Mlp { classes, .. } => Some(classes),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Quadratic {
    pub dim: usize,
}

impl LossModel for Quadratic {
    fn parameter_count(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn init_params(&self, _rng: &mut Stream) -> ParamVector {
        ParamVector::zeros(self.dim)
    }

    fn loss(&self, params: &[f64], x: &[f64], _y: usize) -> f64 {
        0.5 * params.iter().zip(x).map(|(w, x)| (w - x) * (w - x)).sum::<f64>()
    }

    fn gradient(&self, params: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) {
        grad.copy_from_slice(params);
        let inv = 1.0 / batch.len() as f64;
        for &i in batch {
            for (g, x) in grad.iter_mut().zip(data.features(i)) {
                *g -= inv * x;
            }
        }
    }
}

/// Softmax in place; returns `log Σ exp`.
fn softmax(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    logits.iter_mut().for_each(|v| *v /= sum);
    max + sum.ln()
}

fn glorot(rng: &mut Stream, fan_in: usize, fan_out: usize, out: &mut [f64]) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    out.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
}

/// Parameters: row-major `classes × inputs` weights, then `classes` biases.
#[derive(Debug, Clone)]
pub struct Logistic {
    pub inputs: usize,
    pub classes: usize,
}

impl Logistic {
    fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let (w, b) = params.split_at(self.classes * self.inputs);
        (0..self.classes)
            .map(|c| b[c] + w[c * self.inputs..(c + 1) * self.inputs].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

impl LossModel for Logistic {
    fn parameter_count(&self) -> usize {
        self.classes * (self.inputs + 1)
    }

    fn input_dim(&self) -> usize {
        self.inputs
    }

    fn init_params(&self, rng: &mut Stream) -> ParamVector {
        let mut p = vec![0.0; self.parameter_count()];
        glorot(rng, self.inputs, self.classes, &mut p[..self.classes * self.inputs]);
        ParamVector::new(p).expect("finite init")
    }

    fn loss(&self, params: &[f64], x: &[f64], y: usize) -> f64 {
        let mut z = self.logits(params, x);
        let zy = z[y];
        softmax(&mut z) - zy
    }

    fn gradient(&self, params: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let inv = 1.0 / batch.len() as f64;
        let (gw, gb) = grad.split_at_mut(self.classes * self.inputs);
        for &i in batch {
            let x = data.features(i);
            let mut p = self.logits(params, x);
            softmax(&mut p);
            p[data.label(i)] -= 1.0;
            for (c, err) in p.iter().enumerate() {
                let e = err * inv;
                gb[c] += e;
                for (g, xv) in gw[c * self.inputs..(c + 1) * self.inputs].iter_mut().zip(x) {
                    *g += e * xv;
                }
            }
        }
    }
}

/// Parameters, each block column-major: `W1 (hidden × inputs)`, `b1`,
/// `W2 (classes × hidden)`, `b2`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

struct MlpParams<'a> {
    w1: DMatrixView<'a, f64>,
    b1: &'a [f64],
    w2: DMatrixView<'a, f64>,
    b2: &'a [f64],
}

impl Mlp {
    fn offsets(&self) -> [usize; 3] {
        let a = self.hidden * self.inputs;
        let b = a + self.hidden;
        let c = b + self.classes * self.hidden;
        [a, b, c]
    }

    fn split<'a>(&self, params: &'a [f64]) -> MlpParams<'a> {
        let [a, b, c] = self.offsets();
        MlpParams {
            w1: DMatrixView::from_slice(&params[..a], self.hidden, self.inputs),
            b1: &params[a..b],
            w2: DMatrixView::from_slice(&params[b..c], self.classes, self.hidden),
            b2: &params[c..],
        }
    }

    /// Returns hidden activations (B × hidden) and class probabilities (B × classes).
    fn forward(&self, p: &MlpParams<'_>, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut h = x * p.w1.transpose();
        for (mut col, b) in h.column_iter_mut().zip(p.b1) {
            col.apply(|v| *v = (*v + b).tanh());
        }
        let mut logits = &h * p.w2.transpose();
        for (mut col, b) in logits.column_iter_mut().zip(p.b2) {
            col.add_scalar_mut(*b);
        }
        let mut probs = logits;
        let mut row = vec![0.0; self.classes];
        for r in 0..probs.nrows() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = probs[(r, c)];
            }
            softmax(&mut row);
            for (c, v) in row.iter().enumerate() {
                probs[(r, c)] = *v;
            }
        }
        (h, probs)
    }
}

impl LossModel for Mlp {
    fn parameter_count(&self) -> usize {
        self.hidden * (self.inputs + 1) + self.classes * (self.hidden + 1)
    }

    fn input_dim(&self) -> usize {
        self.inputs
    }

    fn init_params(&self, rng: &mut Stream) -> ParamVector {
        let mut p = vec![0.0; self.parameter_count()];
        let [a, b, c] = self.offsets();
        glorot(rng, self.inputs, self.hidden, &mut p[..a]);
        glorot(rng, self.hidden, self.classes, &mut p[b..c]);
        ParamVector::new(p).expect("finite init")
    }

    fn loss(&self, params: &[f64], x: &[f64], y: usize) -> f64 {
        let p = self.split(params);
        let xm = DMatrix::from_row_slice(1, self.inputs, x);
        let (_, probs) = self.forward(&p, &xm);
        -probs[(0, y)].max(f64::MIN_POSITIVE).ln()
    }

    fn gradient(&self, params: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) {
        let p = self.split(params);
        let n = batch.len();
        let x = DMatrix::from_fn(n, self.inputs, |r, c| data.features(batch[r])[c]);
        let (h, mut g) = self.forward(&p, &x);
        // g ← (softmax − onehot) / n
        for (r, &i) in batch.iter().enumerate() {
            g[(r, data.label(i))] -= 1.0;
        }
        g /= n as f64;

        let mut dh = &g * p.w2;
        dh.zip_apply(&h, |d, hv| *d *= 1.0 - hv * hv);

        let [a, b, c] = self.offsets();
        let (gw1, rest) = grad.split_at_mut(a);
        let (gb1, rest) = rest.split_at_mut(b - a);
        let (gw2, gb2) = rest.split_at_mut(c - b);
        DMatrixViewMut::from_slice(gw1, self.hidden, self.inputs).gemm_tr(1.0, &dh, &x, 0.0);
        DMatrixViewMut::from_slice(gw2, self.classes, self.hidden).gemm_tr(1.0, &g, &h, 0.0);
        for (dst, col) in gb1.iter_mut().zip(dh.column_iter()) {
            *dst = col.sum();
        }
        for (dst, col) in gb2.iter_mut().zip(g.column_iter()) {
            *dst = col.sum();
        }
    }
}
