use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::numerics::{dot, GradientVector, ParamVector};

/// Central-difference step used by [`alignment_oracle`].
pub const ORACLE_FD_STEP: f64 = 1e-5;

fn full(model: &impl Model, params: &ParamVector, batch: &Batch) -> Result<(f64, GradientVector)> {
    model.loss_and_grad(params, batch)
}

/// Pair costs and gradients for every source plus the target itself.
fn pair_terms<M: Model>(
    model: &M,
    params: &ParamVector,
    sources: &[&DomainDataset],
    target: &DomainDataset,
) -> Result<(f64, GradientVector, Vec<(f64, GradientVector)>)> {
    let target_batch = target.as_batch()?;
    let (r_t, g_t) = full(model, params, &target_batch)?;
    let mut terms = Vec::with_capacity(sources.len() + 1);
    for src in sources {
        terms.push(full(model, params, &src.as_batch()?)?);
    }
    terms.push((r_t, g_t.clone()));
    Ok((r_t, g_t, terms))
}

/// Mean over the `S + 1` pairs of `R_k + R_T − δ G_T·G_k`, full batch.
pub fn pairwise_objective<M: Model>(
    model: &M,
    params: &ParamVector,
    sources: &[&DomainDataset],
    target: &DomainDataset,
    delta: f64,
) -> Result<f64> {
    let (r_t, g_t, terms) = pair_terms(model, params, sources, target)?;
    let mut total = 0.0;
    for (r_k, g_k) in &terms {
        total += r_k + r_t - delta * dot(&g_t, g_k)?;
    }
    Ok(total / terms.len() as f64)
}

/// The same objective regrouped as target cost, plus mean domain cost,
/// minus δ times the alignment of `G_T` with the mean domain gradient.
pub fn expanded_objective<M: Model>(
    model: &M,
    params: &ParamVector,
    sources: &[&DomainDataset],
    target: &DomainDataset,
    delta: f64,
) -> Result<f64> {
    let (r_t, g_t, terms) = pair_terms(model, params, sources, target)?;
    let k = terms.len() as f64;
    let mean_cost = terms.iter().map(|(r, _)| r).sum::<f64>() / k;
    let grads: Vec<GradientVector> = terms.into_iter().map(|(_, g)| g).collect();
    let mean_grad = GradientVector::mean(&grads)?;
    Ok(r_t + mean_cost - delta * dot(&g_t, &mean_grad)?)
}

/// Finite-difference gradient of `R_k(θ) + R_T(θ) − δ G_T(θ)·G_k(θ)`, with
/// full-batch gradients. Expensive (two gradient evaluations per trainable
/// coordinate and side); meant as a test oracle.
pub fn alignment_oracle<M: Model>(
    model: &M,
    params: &ParamVector,
    domain_k: &DomainDataset,
    target: &DomainDataset,
    delta: f64,
) -> Result<GradientVector> {
    alignment_oracle_with_step(model, params, domain_k, target, delta, ORACLE_FD_STEP)
}

pub fn alignment_oracle_with_step<M: Model>(
    model: &M,
    params: &ParamVector,
    domain_k: &DomainDataset,
    target: &DomainDataset,
    delta: f64,
    step: f64,
) -> Result<GradientVector> {
    let batch_k = domain_k.as_batch()?;
    let batch_t = target.as_batch()?;
    let objective = |theta: &ParamVector| -> Result<f64> {
        let (r_k, g_k) = full(model, theta, &batch_k)?;
        let (r_t, g_t) = full(model, theta, &batch_t)?;
        let v = r_k + r_t - delta * dot(&g_t, &g_k)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("alignment objective"))
        }
    };
    let trainable = model.layout().trainable_mask();
    let mut grad = vec![0.0; params.len()];
    let mut probe = params.clone();
    for i in 0..params.len() {
        if !trainable[i] {
            continue;
        }
        let orig = params[i];
        probe.as_mut_slice()[i] = orig + step;
        let up = objective(&probe)?;
        probe.as_mut_slice()[i] = orig - step;
        let down = objective(&probe)?;
        probe.as_mut_slice()[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(GradientVector::new(grad))
}
