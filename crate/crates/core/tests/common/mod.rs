#![allow(dead_code)]

use fedpda::data::{BenchmarkSpec, DomainDataset};
use fedpda::model::{Mlp, MlpArchitecture, Model};
use fedpda::numerics::{Matrix, ParamVector, Rng};

/// Gaussian blobs around class-dependent centres, shifted by `shift`.
pub fn blobs(rng: &mut Rng, id: &str, n: usize, dim: usize, classes: usize, shift: f64) -> DomainDataset {
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|c| (0..dim).map(|j| if j % classes == c { 1.5 } else { 0.0 }).collect())
        .collect();
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for centre in &centres[c] {
            x.push(centre + shift + rng.standard_normal());
        }
        y.push(c);
    }
    DomainDataset::new(id, Matrix::from_vec(n, dim, x).unwrap(), y, classes).unwrap()
}

pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Mlp {
    Mlp::new(MlpArchitecture::new(input, hidden.to_vec(), classes, 0).unwrap()).unwrap()
}

/// Initial parameters with every trainable coordinate jittered, so that
/// batch-norm scale and shift are not sitting at 1 and 0.
pub fn jittered(model: &Mlp, rng: &mut Rng, std: f64) -> ParamVector {
    let mut p = model.init_params(rng);
    let mask = model.layout().trainable_mask();
    for (v, keep) in p.as_mut_slice().iter_mut().zip(mask) {
        if keep {
            *v += std * rng.standard_normal();
        }
    }
    p
}

/// A small version of the synthetic benchmark for fast federation tests.
pub fn small_benchmark(domains: usize, samples: usize) -> Vec<DomainDataset> {
    BenchmarkSpec {
        num_domains: domains,
        feature_dim: 4,
        num_classes: 3,
        samples_per_domain: samples,
        class_prior: None,
        ..BenchmarkSpec::default()
    }
    .build()
    .unwrap()
}

/// Values at the coordinates where `mask` is set.
pub fn masked(values: &[f64], mask: &[bool]) -> Vec<f64> {
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect()
}
