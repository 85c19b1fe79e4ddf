//! Centralized training and adaptation procedures.
//!
//! All procedures are plain SGD over flat parameter vectors and are generic
//! over [`Model`](crate::model::Model). The distributed counterparts live in
//! [`federation`](crate::federation).

mod adapt;
mod objective;
mod pcgrad;
mod sampler;
mod sgd;
mod staralign;

pub use adapt::{finetune, tent_supervised};
pub use objective::{
    alignment_oracle, alignment_oracle_with_step, expanded_objective, pairwise_objective,
    ORACLE_FD_STEP,
};
pub use pcgrad::{pcgrad_combine, pcgrad_surgery, Surgered};
pub use sampler::BatchSampler;
pub use sgd::{erm, sgd_epochs, sgd_recording};
pub use staralign::{staralign_central_round, staralign_pair};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters shared by the alignment methods and the local SGD loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Inner SGD learning rate.
    pub alpha: f64,
    /// Scale of the first-order update `θ + β(θ̂ − θ)`.
    pub beta: f64,
    /// Local iterations per communication round.
    pub tau: usize,
    /// Communication rounds.
    pub rounds: usize,
    pub batch_size: usize,
    /// Apply the β-update after every interleaved target/source iteration
    /// instead of once after τ iterations.
    pub first_order_per_step: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            alpha: 0.05,
            beta: 0.2,
            tau: 100,
            rounds: 20,
            batch_size: 32,
            first_order_per_step: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.tau == 0 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training procedures implemented here, as recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Erm,
    FedavgLocal,
    FedbnLocal,
    Finetune,
    TentSupervised,
    Pcgrad,
    StaralignCentral,
}

impl MethodId {
    pub const ALL: [MethodId; 7] = [
        MethodId::Erm,
        MethodId::FedavgLocal,
        MethodId::FedbnLocal,
        MethodId::Finetune,
        MethodId::TentSupervised,
        MethodId::Pcgrad,
        MethodId::StaralignCentral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Erm => "erm",
            MethodId::FedavgLocal => "fedavg_local",
            MethodId::FedbnLocal => "fedbn_local",
            MethodId::Finetune => "finetune",
            MethodId::TentSupervised => "tent_supervised",
            MethodId::Pcgrad => "pcgrad",
            MethodId::StaralignCentral => "staralign_central",
        }
    }
}
