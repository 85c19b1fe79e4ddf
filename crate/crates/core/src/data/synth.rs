use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

use super::DomainDataset;

/// How one domain's distribution departs from the shared class-conditional
/// Gaussians: `x' = R(θ)·(scale·x) + offset`, labels drawn from `class_prior`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub rotation_angle: f64,
    pub mean_offset: Vec<f64>,
    pub scale: f64,
    pub class_prior: Vec<f64>,
}

impl DomainShiftSpec {
    pub fn identity(dim: usize, num_classes: usize) -> Self {
        DomainShiftSpec {
            rotation_angle: 0.0,
            mean_offset: vec![0.0; dim],
            scale: 1.0,
            class_prior: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn validate(&self, dim: usize, num_classes: usize) -> Result<()> {
        if self.mean_offset.len() != dim {
            return Err(Error::invalid(format!(
                "mean_offset has {} entries, features have {dim}",
                self.mean_offset.len()
            )));
        }
        if self.class_prior.len() != num_classes {
            return Err(Error::invalid(format!(
                "class_prior has {} entries, expected {num_classes}",
                self.class_prior.len()
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid(format!("scale must be > 0, got {}", self.scale)));
        }
        if !self.rotation_angle.is_finite() || self.mean_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("shift parameters must be finite"));
        }
        if self.class_prior.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid("class_prior entries must be >= 0"));
        }
        let total: f64 = self.class_prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("class_prior sums to {total}, not 1")));
        }
        Ok(())
    }
}

/// Orthogonal matrix rotating every coordinate plane `(2i, 2i+1)` by `angle`.
/// With an odd dimension the last coordinate is fixed.
pub fn rotation_matrix(dim: usize, angle: f64) -> Matrix {
    let mut r = Matrix::zeros(dim, dim);
    let (s, c) = angle.sin_cos();
    let mut i = 0;
    while i + 1 < dim {
        r.set(i, i, c);
        r.set(i, i + 1, -s);
        r.set(i + 1, i, s);
        r.set(i + 1, i + 1, c);
        i += 2;
    }
    if dim % 2 == 1 {
        r.set(dim - 1, dim - 1, 1.0);
    }
    r
}

/// Draws `n` samples: labels from the prior, features from unit-variance
/// Gaussians around `base_class_means` (`C × d`), then applies the shift.
pub fn generate_domain(
    rng: &mut Rng,
    domain_id: impl Into<String>,
    spec: &DomainShiftSpec,
    n: usize,
    base_class_means: &Matrix,
) -> Result<DomainDataset> {
    let (num_classes, dim) = (base_class_means.rows(), base_class_means.cols());
    spec.validate(dim, num_classes)?;
    if n < num_classes {
        return Err(Error::invalid(format!(
            "need at least one sample per class ({num_classes}), got n={n}"
        )));
    }
    let rot = rotation_matrix(dim, spec.rotation_angle);
    let mut labels = Vec::with_capacity(n);
    let mut features = Matrix::zeros(n, dim);
    let mut x = vec![0.0; dim];
    for i in 0..n {
        let y = rng.categorical(&spec.class_prior);
        labels.push(y);
        for (j, slot) in x.iter_mut().enumerate() {
            *slot = spec.scale * (base_class_means.get(y, j) + rng.standard_normal());
        }
        let row = features.row_mut(i);
        for (j, out) in row.iter_mut().enumerate() {
            *out = spec.mean_offset[j]
                + rot.row(j).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    DomainDataset::new(domain_id, features, labels, num_classes)
}

/// Multi-domain synthetic benchmark: shared class means, one shift per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub num_domains: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub samples_per_domain: usize,
    /// Std of the Gaussian the class means are drawn from.
    pub class_separation: f64,
    /// Domain `k` is rotated by `k * rotation_step` radians.
    pub rotation_step: f64,
    /// Std of the per-domain mean offset.
    pub offset_std: f64,
    /// Domain `k` is scaled by `1 + k * scale_step`.
    pub scale_step: f64,
    /// Class prior shared by all domains; `None` means balanced. In TOML a
    /// balanced prior is written as an empty array.
    #[serde(with = "prior_field")]
    pub class_prior: Option<Vec<f64>>,
    pub data_seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            num_domains: 4,
            feature_dim: 10,
            num_classes: 4,
            samples_per_domain: 2000,
            class_separation: 1.0,
            rotation_step: 0.25,
            offset_std: 0.5,
            scale_step: 0.1,
            class_prior: Some(vec![0.55, 0.25, 0.13, 0.07]),
            data_seed: 2023,
        }
    }
}

mod prior_field {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(prior: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(prior.iter().flatten())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Ok((!v.is_empty()).then_some(v))
    }
}

impl BenchmarkSpec {
    pub fn is_imbalanced(&self) -> bool {
        match &self.class_prior {
            None => false,
            Some(p) => p.iter().any(|&v| (v - p[0]).abs() > 1e-12),
        }
    }

    pub fn shifts(&self) -> Vec<DomainShiftSpec> {
        let mut rng = Rng::new(self.data_seed).derive(1);
        let prior = self
            .class_prior
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.num_classes as f64; self.num_classes]);
        (0..self.num_domains)
            .map(|k| DomainShiftSpec {
                rotation_angle: k as f64 * self.rotation_step,
                mean_offset: (0..self.feature_dim)
                    .map(|_| self.offset_std * rng.standard_normal())
                    .collect(),
                scale: 1.0 + k as f64 * self.scale_step,
                class_prior: prior.clone(),
            })
            .collect()
    }

    pub fn class_means(&self) -> Matrix {
        let mut rng = Rng::new(self.data_seed).derive(0);
        let n = self.num_classes * self.feature_dim;
        let data = (0..n)
            .map(|_| self.class_separation * rng.standard_normal())
            .collect();
        Matrix::from_vec(self.num_classes, self.feature_dim, data).expect("sized above")
    }

    /// Builds every domain; domain `k` is named `domain{k}`.
    pub fn build(&self) -> Result<Vec<DomainDataset>> {
        if self.num_domains < 2 {
            return Err(Error::Config("benchmark needs at least 2 domains".into()));
        }
        let means = self.class_means();
        self.shifts()
            .iter()
            .enumerate()
            .map(|(k, shift)| {
                let mut rng = Rng::new(self.data_seed).derive(100 + k as u64);
                generate_domain(
                    &mut rng,
                    format!("domain{k}"),
                    shift,
                    self.samples_per_domain,
                    &means,
                )
            })
            .collect()
    }
}
