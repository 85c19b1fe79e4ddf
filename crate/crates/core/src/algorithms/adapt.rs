use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{ParamVector, Rng};

use super::{sgd_epochs, AlignConfig, BatchSampler};

/// Full-parameter SGD on the labelled target data for `cfg.tau` steps.
pub fn finetune<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    target_labelled: &DomainDataset,
    cfg: &AlignConfig,
    rng: &mut Rng,
) -> Result<ParamVector> {
    if target_labelled.is_empty() {
        return Err(Error::invalid("fine-tuning needs labelled target data"));
    }
    sgd_epochs(model, params, target_labelled, cfg.alpha, cfg.batch_size, cfg.tau, rng)
}

/// Supervised test-time adaptation: cross-entropy SGD for `cfg.tau` steps
/// that only moves the batch-norm scale and shift. Normalization uses batch
/// statistics, and the running statistics keep tracking them.
pub fn tent_supervised<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    target_labelled: &DomainDataset,
    cfg: &AlignConfig,
    rng: &mut Rng,
) -> Result<ParamVector> {
    if !model.layout().has_batch_norm() {
        return Err(Error::Config(
            "supervised TENT needs a model with a batch-norm layer".into(),
        ));
    }
    if target_labelled.is_empty() {
        return Err(Error::invalid("TENT needs labelled target data"));
    }
    let mask = model.layout().bn_affine_mask();
    let mut sampler = BatchSampler::new(target_labelled.len(), cfg.batch_size, model.min_batch())?;
    let mut theta = params.clone();
    for _ in 0..cfg.tau {
        let batch = sampler.next_batch(target_labelled, rng)?;
        theta = model.sgd_step_masked(&theta, &batch, cfg.alpha, Some(&mask))?.0;
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearLeastSquares, Mlp, MlpArchitecture};
    use crate::numerics::Matrix;

    fn data(rng: &mut Rng, n: usize) -> DomainDataset {
        let x = Matrix::from_vec(n, 3, rng.gaussian_vec(n * 3, 0.0, 1.0).unwrap()).unwrap();
        let y = (0..n).map(|i| i % 3).collect();
        DomainDataset::new("t", x, y, 3).unwrap()
    }

    fn cfg(alpha: f64) -> AlignConfig {
        AlignConfig {
            alpha,
            tau: 20,
            batch_size: 8,
            ..AlignConfig::default()
        }
    }

    #[test]
    fn tent_only_moves_bn_segments() {
        let m = Mlp::new(MlpArchitecture::new(3, vec![6, 5], 3, 1).unwrap()).unwrap();
        let mut rng = Rng::new(0);
        let p = m.init_params(&mut rng);
        let d = data(&mut rng, 30);
        let out = tent_supervised(&m, &p, &d, &cfg(0.1), &mut rng).unwrap();
        let bn = m.layout().bn_mask();
        let mut moved_affine = false;
        let affine = m.layout().bn_affine_mask();
        for i in 0..p.len() {
            if !bn[i] {
                assert_eq!(out[i].to_bits(), p[i].to_bits(), "coord {i}");
            } else if affine[i] && out[i] != p[i] {
                moved_affine = true;
            }
        }
        assert!(moved_affine);
    }

    #[test]
    fn zero_rate_is_identity() {
        let m = Mlp::new(MlpArchitecture::new(3, vec![6], 3, 0).unwrap()).unwrap();
        let mut rng = Rng::new(1);
        let p = m.init_params(&mut rng);
        let d = data(&mut rng, 30);
        assert!(tent_supervised(&m, &p, &d, &cfg(0.0), &mut rng).unwrap().bit_eq(&p));
        assert!(finetune(&m, &p, &d, &cfg(0.0), &mut rng).unwrap().bit_eq(&p));
    }

    #[test]
    fn tent_requires_batch_norm() {
        let m = LinearLeastSquares::new(3, 3);
        let d = data(&mut Rng::new(2), 10);
        let p = ParamVector::zeros(m.num_params());
        assert!(matches!(
            tent_supervised(&m, &p, &d, &cfg(0.1), &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn finetune_is_sgd_on_target() {
        let m = Mlp::new(MlpArchitecture::new(3, vec![6], 3, 0).unwrap()).unwrap();
        let mut rng = Rng::new(3);
        let p = m.init_params(&mut rng);
        let d = data(&mut rng, 30);
        let c = cfg(0.05);
        let a = finetune(&m, &p, &d, &c, &mut Rng::new(9)).unwrap();
        let b = sgd_epochs(&m, &p, &d, c.alpha, c.batch_size, c.tau, &mut Rng::new(9)).unwrap();
        assert!(a.bit_eq(&b));
    }
}
