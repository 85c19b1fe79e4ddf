//! Models trained by the adaptation algorithms.
//!
//! Everything operates on flat [`ParamVector`]s so that the federated and
//! alignment code never needs to know the network structure. [`Mlp`] is the
//! workhorse; [`LinearLeastSquares`] is a quadratic model whose Hessian is
//! known in closed form, used to check second-order behaviour.

mod layout;
mod linear;
mod metrics;
mod mlp;

pub use layout::{MlpArchitecture, ParamLayout, Segment, SegmentKind};
pub use linear::LinearLeastSquares;
pub use metrics::{weighted_accuracy, EvalMetrics};
pub use mlp::{ForwardPass, Mlp, Mode, BN_EPS, BN_MOMENTUM};

use crate::data::DomainDataset;
use crate::error::{check_len, Error, Result};
use crate::numerics::{axpy, GradientVector, Matrix, ParamVector};

/// Features and labels for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::BatchSize { got: 0, min: 1 });
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A differentiable model over flat parameter vectors.
pub trait Model: Send + Sync {
    fn layout(&self) -> &ParamLayout;

    fn num_params(&self) -> usize {
        self.layout().len()
    }

    /// Smallest batch a training step accepts.
    fn min_batch(&self) -> usize {
        1
    }

    /// Mean loss over the batch and its gradient. Non-trainable coordinates
    /// of the gradient are zero.
    fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, GradientVector)>;

    /// One plain SGD step. Returns the new parameters and the gradient taken
    /// at the old ones. A zero learning rate leaves `params` untouched.
    fn sgd_step(
        &self,
        params: &ParamVector,
        batch: &Batch,
        alpha: f64,
    ) -> Result<(ParamVector, GradientVector)> {
        self.sgd_step_masked(params, batch, alpha, None)
    }

    /// SGD step restricted to coordinates where `mask` is `true`; the
    /// returned gradient is the masked one.
    fn sgd_step_masked(
        &self,
        params: &ParamVector,
        batch: &Batch,
        alpha: f64,
        mask: Option<&[bool]>,
    ) -> Result<(ParamVector, GradientVector)> {
        self.sgd_step_with(params, batch, alpha, &mut |g| {
            Ok(match mask {
                Some(m) => g.masked(m),
                None => g,
            })
        })
    }

    /// SGD step along `direction(gradient)` instead of the raw gradient.
    /// Any state the model tracks from the batch (running statistics) is
    /// updated as for a plain step. Returns the direction actually used.
    fn sgd_step_with(
        &self,
        params: &ParamVector,
        batch: &Batch,
        alpha: f64,
        direction: &mut dyn FnMut(GradientVector) -> Result<GradientVector>,
    ) -> Result<(ParamVector, GradientVector)> {
        let (_, grad) = self.loss_and_grad(params, batch)?;
        let dir = direction(grad)?;
        check_len(params.len(), dir.len())?;
        if alpha == 0.0 {
            return Ok((params.clone(), dir));
        }
        Ok((axpy(params, -alpha, &dir)?, dir))
    }

    fn evaluate(&self, params: &ParamVector, data: &DomainDataset) -> Result<EvalMetrics>;
}
