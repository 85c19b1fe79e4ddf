use crate::data::DomainDataset;
use crate::error::{check_len, Result};
use crate::numerics::{GradientVector, ParamVector};

use super::{Batch, EvalMetrics, Model, ParamLayout};

/// Linear map regressed onto one-hot labels with squared error,
/// `L = (1/2n) Σ ‖W x + b − e_y‖²`. Quadratic in the parameters.
#[derive(Debug, Clone)]
pub struct LinearLeastSquares {
    input_dim: usize,
    num_classes: usize,
    layout: ParamLayout,
}

impl LinearLeastSquares {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        LinearLeastSquares {
            input_dim,
            num_classes,
            layout: ParamLayout::linear(input_dim, num_classes),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn outputs(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        let bias = &params[d * self.num_classes..];
        (0..self.num_classes)
            .map(|c| {
                bias[c]
                    + params[c * d..(c + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }
}

impl Model for LinearLeastSquares {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, GradientVector)> {
        check_len(self.layout.len(), params.len())?;
        check_len(self.input_dim, batch.features.cols())?;
        let d = self.input_dim;
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.layout.len()];
        let mut loss = 0.0;
        for (i, &y) in batch.labels.iter().enumerate() {
            let x = batch.features.row(i);
            let out = self.outputs(params.as_slice(), x);
            for (c, o) in out.iter().enumerate() {
                let r = o - if c == y { 1.0 } else { 0.0 };
                loss += 0.5 * r * r;
                for (g, v) in grad[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += r * v;
                }
                grad[d * self.num_classes + c] += r;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, GradientVector::new(grad)))
    }

    fn evaluate(&self, params: &ParamVector, data: &DomainDataset) -> Result<EvalMetrics> {
        let batch = data.as_batch()?;
        let (loss, _) = self.loss_and_grad(params, &batch)?;
        let preds: Vec<usize> = (0..batch.len())
            .map(|i| argmax(&self.outputs(params.as_slice(), batch.features.row(i))))
            .collect();
        EvalMetrics::from_predictions(&preds, &batch.labels, self.num_classes, loss)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
