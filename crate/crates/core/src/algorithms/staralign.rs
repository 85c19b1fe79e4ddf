use crate::data::DomainDataset;
use crate::error::Result;
use crate::model::{Batch, Model};
use crate::numerics::{mean_vectors, ParamVector, Rng};

use super::{AlignConfig, BatchSampler};

/// One source-target pair: an SGD step on the target batch, an SGD step on
/// the pair partner's batch, then `θ + β(θ̂ − θ)`.
pub fn staralign_pair<M: Model + ?Sized>(
    model: &M,
    theta: &ParamVector,
    target_batch: &Batch,
    partner_batch: &Batch,
    alpha: f64,
    beta: f64,
) -> Result<ParamVector> {
    let (hat, _) = model.sgd_step(theta, target_batch, alpha)?;
    let (hat, _) = model.sgd_step(&hat, partner_batch, alpha)?;
    theta.interpolate(&hat, beta)
}

/// One outer iteration of centralized source-target gradient alignment.
///
/// Pairs every source with the target plus the target with itself (the
/// self pair draws a second, independent target batch), and returns the
/// mean of the `S + 1` pair updates.
pub fn staralign_central_round<M: Model + ?Sized>(
    model: &M,
    theta_t: &ParamVector,
    sources: &[&DomainDataset],
    target: &DomainDataset,
    cfg: &AlignConfig,
    rng: &mut Rng,
) -> Result<ParamVector> {
    cfg.validate()?;
    let mut target_sampler = BatchSampler::new(target.len(), cfg.batch_size, model.min_batch())?;
    let mut source_samplers = sources
        .iter()
        .map(|d| BatchSampler::new(d.len(), cfg.batch_size, model.min_batch()))
        .collect::<Result<Vec<_>>>()?;

    let mut pair_models = Vec::with_capacity(sources.len() + 1);
    for k in 0..=sources.len() {
        let target_batch = target_sampler.next_batch(target, rng)?;
        let partner = match sources.get(k) {
            Some(src) => source_samplers[k].next_batch(src, rng)?,
            None => target_sampler.next_batch(target, rng)?,
        };
        pair_models.push(staralign_pair(
            model,
            theta_t,
            &target_batch,
            &partner,
            cfg.alpha,
            cfg.beta,
        )?);
    }
    mean_vectors(&pair_models)
}
