use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{GradientVector, ParamVector, Rng};

use super::BatchSampler;

/// `steps` minibatch SGD updates on `data`.
pub fn sgd_epochs<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    data: &DomainDataset,
    alpha: f64,
    batch_size: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<ParamVector> {
    sgd_recording(model, params, data, alpha, batch_size, steps, rng).map(|(p, _)| p)
}

/// Like [`sgd_epochs`] but also returns the gradient taken at every step.
pub fn sgd_recording<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    data: &DomainDataset,
    alpha: f64,
    batch_size: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<(ParamVector, Vec<GradientVector>)> {
    if steps == 0 {
        return Err(Error::invalid("sgd needs at least one step"));
    }
    let mut sampler = BatchSampler::new(data.len(), batch_size, model.min_batch())?;
    let mut theta = params.clone();
    let mut grads = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = sampler.next_batch(data, rng)?;
        let (next, g) = model.sgd_step(&theta, &batch, alpha)?;
        theta = next;
        grads.push(g);
    }
    Ok((theta, grads))
}

/// Empirical risk minimization over the pooled source domains.
pub fn erm<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    sources: &[&DomainDataset],
    alpha: f64,
    batch_size: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<ParamVector> {
    let pooled = DomainDataset::concat("pooled", sources)?;
    sgd_epochs(model, params, &pooled, alpha, batch_size, steps, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mlp, MlpArchitecture, Model};
    use crate::numerics::{axpy, Matrix};

    fn blobs(rng: &mut Rng, n: usize) -> DomainDataset {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -2.0 } else { 2.0 };
            rows.push(vec![c + 0.5 * rng.standard_normal(), c + 0.5 * rng.standard_normal()]);
            labels.push(y);
        }
        DomainDataset::new("blobs", Matrix::from_rows(&rows).unwrap(), labels, 2).unwrap()
    }

    fn net() -> Mlp {
        Mlp::new(MlpArchitecture::new(2, vec![8, 4], 2, 0).unwrap()).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let m = net();
        let mut rng = Rng::new(0);
        let data = blobs(&mut rng, 40);
        let p = m.init_params(&mut rng);
        let out = sgd_epochs(&m, &p, &data, 0.0, 8, 25, &mut rng).unwrap();
        assert!(out.bit_eq(&p));
    }

    #[test]
    fn one_full_batch_step_is_the_definition() {
        let m = net();
        let mut rng = Rng::new(1);
        let data = blobs(&mut rng, 30);
        let p = m.init_params(&mut rng);
        let out = sgd_epochs(&m, &p, &data, 0.1, 1000, 1, &mut rng).unwrap();
        let (_, g) = m.loss_and_grad(&p, &data.as_batch().unwrap()).unwrap();
        let expected = axpy(&p, -0.1, &g).unwrap();
        let trainable = m.layout().trainable_mask();
        for i in 0..p.len() {
            if trainable[i] {
                assert_eq!(out[i].to_bits(), expected[i].to_bits());
            }
        }
    }

    #[test]
    fn loss_decreases_on_separable_blobs() {
        let m = net();
        let mut rng = Rng::new(2);
        let data = blobs(&mut rng, 200);
        let p = m.init_params(&mut rng);
        let full = data.as_batch().unwrap();
        let (before, _) = m.loss_and_grad(&p, &full).unwrap();
        let out = sgd_epochs(&m, &p, &data, 0.1, 16, 200, &mut rng).unwrap();
        let (after, _) = m.loss_and_grad(&out, &full).unwrap();
        assert!(after < before, "{after} >= {before}");
        assert!(m.evaluate(&out, &data).unwrap().accuracy > 0.95);
    }

    #[test]
    fn deterministic_given_seed() {
        let m = net();
        let data = blobs(&mut Rng::new(3), 64);
        let p = m.init_params(&mut Rng::new(4));
        let a = sgd_epochs(&m, &p, &data, 0.05, 8, 30, &mut Rng::new(5)).unwrap();
        let b = sgd_epochs(&m, &p, &data, 0.05, 8, 30, &mut Rng::new(5)).unwrap();
        assert!(a.bit_eq(&b));
    }
}
