use std::collections::BTreeMap;

use crate::algorithms::{pcgrad_combine, AlignConfig, BatchSampler};
use crate::data::DomainDataset;
use crate::error::{check_len, Error, Result};
use crate::model::Model;
use crate::numerics::{axpy, mean_vectors, GradientVector, ParamVector, Rng};

use super::protocol::{AvgGradient, NodeId};

/// A source node: owns its private data and answers broadcasts.
pub struct SourceNode<'a, M: Model + ?Sized> {
    id: NodeId,
    model: &'a M,
    data: &'a DomainDataset,
    cfg: AlignConfig,
    rng: Rng,
    sampler: BatchSampler,
    last_round: Option<u32>,
    /// Own batch-norm segments, kept across FedBN rounds.
    local_bn: Option<Vec<f64>>,
}

impl<'a, M: Model + ?Sized> SourceNode<'a, M> {
    pub fn new(id: NodeId, model: &'a M, data: &'a DomainDataset, cfg: AlignConfig, rng: Rng) -> Result<Self> {
        cfg.validate()?;
        let sampler = BatchSampler::new(data.len(), cfg.batch_size, model.min_batch())?;
        Ok(SourceNode {
            id,
            model,
            data,
            cfg,
            rng,
            sampler,
            last_round: None,
            local_bn: None,
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    /// Seeds the node's own batch-norm block for FedBN rounds.
    pub fn with_local_bn(mut self, bn: Vec<f64>) -> Result<Self> {
        let layout = self.model.layout();
        check_len(layout.bn_mask().iter().filter(|b| **b).count(), bn.len())?;
        self.local_bn = Some(bn);
        Ok(self)
    }

    pub fn local_bn(&self) -> Option<&[f64]> {
        self.local_bn.as_deref()
    }

    fn accept_round(&mut self, round: u32) -> Result<()> {
        if let Some(last) = self.last_round {
            if round <= last {
                return Err(Error::Protocol(format!(
                    "{}: round {round} is not newer than round {last}",
                    self.id
                )));
            }
        }
        self.last_round = Some(round);
        Ok(())
    }

    /// Starts from the broadcast model, takes `τ` local SGD steps and returns
    /// the mean of the gradients used.
    pub fn source_round(&mut self, theta_t: &ParamVector, round: u32) -> Result<AvgGradient> {
        check_len(self.model.num_params(), theta_t.len())?;
        self.accept_round(round)?;
        let mut theta = theta_t.clone();
        let mut grads = Vec::with_capacity(self.cfg.tau);
        for _ in 0..self.cfg.tau {
            let batch = self.sampler.next_batch(self.data, &mut self.rng)?;
            let (next, g) = self.model.sgd_step(&theta, &batch, self.cfg.alpha)?;
            theta = next;
            grads.push(g);
        }
        Ok(AvgGradient {
            round,
            node: self.id,
            grad: GradientVector::mean(&grads)?,
        })
    }

    /// Local training for model-averaging rounds. With `keep_bn` the node
    /// swaps its own batch-norm block into the broadcast model first, and
    /// remembers the trained block afterwards.
    pub fn local_training_round(&mut self, global: &ParamVector, round: u32, keep_bn: bool) -> Result<ParamVector> {
        check_len(self.model.num_params(), global.len())?;
        self.accept_round(round)?;
        let layout = self.model.layout();
        let mut theta = global.clone();
        if keep_bn {
            if let Some(bn) = &self.local_bn {
                layout.insert_bn(theta.as_mut_slice(), bn)?;
            }
        }
        for _ in 0..self.cfg.tau {
            let batch = self.sampler.next_batch(self.data, &mut self.rng)?;
            theta = self.model.sgd_step(&theta, &batch, self.cfg.alpha)?.0;
        }
        if keep_bn && layout.has_batch_norm() {
            self.local_bn = Some(layout.extract_bn(theta.as_slice()));
        }
        Ok(theta)
    }
}

/// How the target folds the source gradients into its model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRule {
    StarAlign,
    PcGrad,
}

/// The target node: owns the labelled target data and the deployed model.
pub struct TargetNode<'a, M: Model + ?Sized> {
    model: &'a M,
    data: &'a DomainDataset,
    cfg: AlignConfig,
    rng: Rng,
    sampler: BatchSampler,
    sources: Vec<NodeId>,
}

impl<'a, M: Model + ?Sized> TargetNode<'a, M> {
    /// `sources` lists the nodes whose gradients every round must contain.
    pub fn new(
        model: &'a M,
        data: &'a DomainDataset,
        cfg: AlignConfig,
        rng: Rng,
        mut sources: Vec<NodeId>,
    ) -> Result<Self> {
        cfg.validate()?;
        sources.sort();
        if sources.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate source node id".into()));
        }
        let sampler = BatchSampler::new(data.len(), cfg.batch_size, model.min_batch())?;
        Ok(TargetNode {
            model,
            data,
            cfg,
            rng,
            sampler,
            sources,
        })
    }

    /// Checks that `received` holds exactly one current-round gradient per
    /// expected source, and returns them ordered by node id.
    fn collate(&self, round: u32, received: Vec<AvgGradient>) -> Result<Vec<AvgGradient>> {
        let mut by_node = BTreeMap::new();
        for msg in received {
            if msg.round != round {
                return Err(Error::Protocol(format!(
                    "{} sent a gradient for round {} during round {round}",
                    msg.node, msg.round
                )));
            }
            if self.sources.binary_search(&msg.node).is_err() {
                return Err(Error::Protocol(format!("unexpected gradient from {}", msg.node)));
            }
            check_len(self.model.num_params(), msg.grad.len())?;
            let node = msg.node;
            if by_node.insert(node, msg).is_some() {
                return Err(Error::Protocol(format!("duplicate gradient from {node}")));
            }
        }
        if let Some(missing) = self.sources.iter().find(|id| !by_node.contains_key(id)) {
            return Err(Error::Protocol(format!("no gradient from {missing} in round {round}")));
        }
        Ok(by_node.into_values().collect())
    }

    pub fn round(
        &mut self,
        rule: TargetRule,
        theta_t: &ParamVector,
        round: u32,
        received: Vec<AvgGradient>,
    ) -> Result<ParamVector> {
        match rule {
            TargetRule::StarAlign => self.target_round(theta_t, round, received),
            TargetRule::PcGrad => self.pcgrad_round(theta_t, round, received),
        }
    }

    /// Aggregates one round of distributed alignment. For every source `k`
    /// (in node-id order) and then the target itself, `θ̂` starts at `θ_T`
    /// and takes `τ` iterations of a target SGD step followed by `−α ḡ_k`
    /// (for the target's own pair, a second target SGD step on a fresh
    /// batch). Then `θ_k = θ_T + β(θ̂ − θ_T)` and the result is the mean.
    pub fn target_round(&mut self, theta_t: &ParamVector, round: u32, received: Vec<AvgGradient>) -> Result<ParamVector> {
        check_len(self.model.num_params(), theta_t.len())?;
        let grads = self.collate(round, received)?;
        let (alpha, beta) = (self.cfg.alpha, self.cfg.beta);
        let mut pairs = Vec::with_capacity(grads.len() + 1);
        for k in 0..=grads.len() {
            let partner = grads.get(k).map(|g| &g.grad);
            let mut anchor = theta_t.clone();
            let mut hat = theta_t.clone();
            for _ in 0..self.cfg.tau {
                let batch = self.sampler.next_batch(self.data, &mut self.rng)?;
                hat = self.model.sgd_step(&hat, &batch, alpha)?.0;
                hat = match partner {
                    Some(g) => axpy(&hat, -alpha, g)?,
                    None => {
                        let again = self.sampler.next_batch(self.data, &mut self.rng)?;
                        self.model.sgd_step(&hat, &again, alpha)?.0
                    }
                };
                if self.cfg.first_order_per_step {
                    anchor = anchor.interpolate(&hat, beta)?;
                    hat = anchor.clone();
                }
            }
            pairs.push(if self.cfg.first_order_per_step {
                anchor
            } else {
                theta_t.interpolate(&hat, beta)?
            });
        }
        mean_vectors(&pairs)
    }

    /// Alternative aggregation: `τ` target steps whose direction is the
    /// gradient-surgery combination of the fresh target gradient with every
    /// source's averaged gradient.
    pub fn pcgrad_round(&mut self, theta_t: &ParamVector, round: u32, received: Vec<AvgGradient>) -> Result<ParamVector> {
        check_len(self.model.num_params(), theta_t.len())?;
        let grads = self.collate(round, received)?;
        let sources: Vec<GradientVector> = grads.into_iter().map(|g| g.grad).collect();
        let mut theta = theta_t.clone();
        for _ in 0..self.cfg.tau {
            let batch = self.sampler.next_batch(self.data, &mut self.rng)?;
            let rng = &mut self.rng;
            theta = self
                .model
                .sgd_step_with(&theta, &batch, self.cfg.alpha, &mut |g_t| {
                    if sources.is_empty() {
                        return Ok(g_t);
                    }
                    let mut all = Vec::with_capacity(sources.len() + 1);
                    all.push(g_t);
                    all.extend(sources.iter().cloned());
                    pcgrad_combine(&all, rng)
                })?
                .0;
        }
        Ok(theta)
    }
}
