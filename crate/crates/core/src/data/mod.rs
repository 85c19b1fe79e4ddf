//! Per-domain datasets: synthetic generation with controllable shift,
//! CSV ingestion, and train/validation/test splitting.

mod csv_io;
mod split;
mod synth;

pub use csv_io::{load_csv, write_csv, CsvError, CsvSchema};
pub use split::{count_of, split, subsample_labelled, subsample_labelled_count, SplitSpec};
pub use synth::{generate_domain, rotation_matrix, BenchmarkSpec, DomainShiftSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numerics::Matrix;

/// Labelled samples held by one federation node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    domain_id: String,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl DomainDataset {
    pub fn new(
        domain_id: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be >= 1"));
        }
        if labels.is_empty() {
            return Err(Error::invalid("a dataset needs at least one sample"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(DomainDataset {
            domain_id: domain_id.into(),
            features,
            labels,
            num_classes,
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> DomainDataset {
        DomainDataset {
            domain_id: self.domain_id.clone(),
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        Batch::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The whole dataset as one batch, in row order.
    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone())
    }

    /// Concatenates datasets with the same feature dimension and class count.
    pub fn concat(domain_id: impl Into<String>, parts: &[&DomainDataset]) -> Result<DomainDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.feature_dim() != first.feature_dim() || p.num_classes != first.num_classes {
                return Err(Error::invalid("datasets differ in shape"));
            }
            for i in 0..p.len() {
                rows.push(p.features.row(i).to_vec());
            }
            labels.extend_from_slice(&p.labels);
        }
        DomainDataset::new(
            domain_id,
            Matrix::from_rows(&rows)?,
            labels,
            first.num_classes,
        )
    }
}
