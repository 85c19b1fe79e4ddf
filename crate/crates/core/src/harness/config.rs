//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! snapshot_count = 5
//! snapshot_interval = 1
//! methods = ["finetune", "fedpda_fedbn", "staralign"]
//! output = "results"
//!
//! [data.synthetic]          # or: [[data.csv]] path = "...", domain_id = "..."
//! samples_per_domain = 2000
//!
//! [model]
//! hidden_dims = [32, 32]
//!
//! [pretrain]
//! aggregation = "fedbn"
//! rounds = 50
//!
//! [adapt]
//! alpha = 0.05
//! tau = 100
//!
//! [split]
//! target_labelled_frac = 0.018
//! ```
//!
//! Every table and key is optional except `methods`; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::AlignConfig;
use crate::data::{load_csv, BenchmarkSpec, CsvSchema, DomainDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::federation::Aggregation;
use crate::model::MlpArchitecture;

/// Adaptation procedures the harness can run on a deployed model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMethod {
    /// The pre-trained model as deployed, no adaptation.
    Deployed,
    /// Deployed model with batch-norm statistics re-estimated on the
    /// labelled target data.
    FedbnTargetBn,
    Finetune,
    TentSupervised,
    /// Random initialization, then fine-tuning on the target.
    FromScratch,
    /// The target joins FedBN rounds with the sources.
    FedpdaFedbn,
    /// Target steps along the gradient-surgery combination of target and
    /// source gradients.
    FedpdaPcgrad,
    /// Distributed source-target gradient alignment.
    Staralign,
    /// Centralized alignment with direct access to source data.
    StaralignCentral,
}

impl AdaptMethod {
    pub const ALL: [AdaptMethod; 9] = [
        AdaptMethod::Deployed,
        AdaptMethod::FedbnTargetBn,
        AdaptMethod::Finetune,
        AdaptMethod::TentSupervised,
        AdaptMethod::FromScratch,
        AdaptMethod::FedpdaFedbn,
        AdaptMethod::FedpdaPcgrad,
        AdaptMethod::Staralign,
        AdaptMethod::StaralignCentral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMethod::Deployed => "deployed",
            AdaptMethod::FedbnTargetBn => "fedbn_target_bn",
            AdaptMethod::Finetune => "finetune",
            AdaptMethod::TentSupervised => "tent_supervised",
            AdaptMethod::FromScratch => "from_scratch",
            AdaptMethod::FedpdaFedbn => "fedpda_fedbn",
            AdaptMethod::FedpdaPcgrad => "fedpda_pcgrad",
            AdaptMethod::Staralign => "staralign",
            AdaptMethod::StaralignCentral => "staralign_central",
        }
    }

    /// Methods that produce a single model rather than a trajectory.
    pub fn is_static(self) -> bool {
        matches!(self, AdaptMethod::Deployed | AdaptMethod::FedbnTargetBn)
    }
}

impl std::str::FromStr for AdaptMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdaptMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

impl std::fmt::Display for AdaptMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDomain {
    pub path: PathBuf,
    pub domain_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<BenchmarkSpec>,
    #[serde(default)]
    pub csv: Vec<CsvDomain>,
    /// Class count for CSV data; inferred from the labels when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: Some(BenchmarkSpec::default()),
            csv: Vec::new(),
            num_classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub bn_after_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![32, 32],
            bn_after_layer: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub aggregation: Aggregation,
    pub rounds: usize,
    pub alpha: f64,
    pub tau: usize,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            aggregation: Aggregation::FedBn,
            rounds: 50,
            alpha: 0.05,
            tau: 100,
            batch_size: 32,
        }
    }
}

impl PretrainConfig {
    pub fn align(&self) -> AlignConfig {
        AlignConfig {
            alpha: self.alpha,
            tau: self.tau,
            rounds: self.rounds,
            batch_size: self.batch_size,
            ..AlignConfig::default()
        }
    }
}

/// What the labelled target fraction is a fraction of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelledBasis {
    /// `frac × |D_T|` samples, drawn from the target's training split.
    #[default]
    Dataset,
    /// `frac` of the target's training split.
    TrainSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Weighted accuracy when the synthetic class prior is imbalanced,
    /// plain accuracy otherwise.
    #[default]
    Auto,
    Accuracy,
    WeightedAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub methods: Vec<AdaptMethod>,
    pub pretrain: PretrainConfig,
    pub adapt: AlignConfig,
    pub split: SplitSpec,
    pub labelled_basis: LabelledBasis,
    pub selection_metric: SelectionMetric,
    pub seeds: Vec<u64>,
    pub snapshot_count: usize,
    /// Rounds between snapshots of adaptation trajectories.
    pub snapshot_interval: usize,
    /// Held-out domains to iterate over; empty means every domain.
    pub targets: Vec<String>,
    /// Seed of the train/val/test partition, shared by all runs.
    pub split_seed: u64,
    /// Run independent (target, seed) cells on a thread pool.
    pub parallel: bool,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            methods: vec![
                AdaptMethod::Deployed,
                AdaptMethod::Finetune,
                AdaptMethod::FedpdaFedbn,
                AdaptMethod::Staralign,
            ],
            pretrain: PretrainConfig::default(),
            adapt: AlignConfig::default(),
            split: SplitSpec::default(),
            labelled_basis: LabelledBasis::Dataset,
            selection_metric: SelectionMetric::Auto,
            seeds: vec![0, 1, 2],
            snapshot_count: 5,
            snapshot_interval: 1,
            targets: Vec::new(),
            split_seed: 0,
            parallel: true,
            output: PathBuf::from("results"),
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(field("seeds", "must not be empty"));
        }
        if self.snapshot_count == 0 {
            return Err(field("snapshot_count", "must be >= 1"));
        }
        if self.snapshot_interval == 0 {
            return Err(field("snapshot_interval", "must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(field("methods", "must list at least one method"));
        }
        self.adapt.validate().map_err(|e| field("adapt", e))?;
        self.pretrain.align().validate().map_err(|e| field("pretrain", e))?;
        if !matches!(self.pretrain.aggregation, Aggregation::FedAvg | Aggregation::FedBn) {
            return Err(field("pretrain.aggregation", "must be fedavg or fedbn"));
        }
        self.split.validate().map_err(|e| field("split", e))?;
        self.architecture_for(1, 1)
            .map_err(|e| field("model", e))?;
        let trajectory = self.adapt.rounds / self.snapshot_interval;
        if self.methods.iter().any(|m| !m.is_static()) && trajectory < self.snapshot_count {
            return Err(field(
                "snapshot_count",
                format!(
                    "{} snapshots requested but adapt.rounds / snapshot_interval = {trajectory}",
                    self.snapshot_count
                ),
            ));
        }
        match (&self.data.synthetic, self.data.csv.is_empty()) {
            (Some(_), false) => Err(field("data", "give either synthetic or csv, not both")),
            (None, true) => Err(field("data", "no synthetic spec and no csv domains")),
            (None, false) if self.data.csv.len() < 2 => {
                Err(field("data.csv", "need at least two domains"))
            }
            _ => Ok(()),
        }
    }

    pub fn architecture_for(&self, input_dim: usize, num_classes: usize) -> Result<MlpArchitecture> {
        MlpArchitecture::new(
            input_dim,
            self.model.hidden_dims.clone(),
            num_classes,
            self.model.bn_after_layer,
        )
    }

    /// Whether selection and reporting use weighted accuracy.
    pub fn weighted_selection(&self) -> bool {
        match self.selection_metric {
            SelectionMetric::Accuracy => false,
            SelectionMetric::WeightedAccuracy => true,
            SelectionMetric::Auto => self
                .data
                .synthetic
                .as_ref()
                .is_some_and(BenchmarkSpec::is_imbalanced),
        }
    }

    /// Builds or loads every domain. CSV paths are relative to `base`.
    pub fn load_domains(&self, base: &Path) -> Result<Vec<DomainDataset>> {
        if let Some(spec) = &self.data.synthetic {
            return spec.build();
        }
        let mut out: Vec<DomainDataset> = Vec::with_capacity(self.data.csv.len());
        for d in &self.data.csv {
            let schema = CsvSchema {
                domain_id: d.domain_id.clone(),
                num_classes: self.data.num_classes,
                feature_count: out.first().map(DomainDataset::feature_dim),
            };
            out.push(load_csv(base.join(&d.path), &schema)?);
        }
        // all domains must share one label space
        let c = out.iter().map(DomainDataset::num_classes).max().unwrap_or(0);
        out.into_iter()
            .map(|d| {
                if d.num_classes() == c {
                    Ok(d)
                } else {
                    DomainDataset::new(d.domain_id(), d.features().clone(), d.labels().to_vec(), c)
                }
            })
            .collect()
    }

    /// Indices of the held-out domains, in domain order.
    pub fn target_indices(&self, domains: &[DomainDataset]) -> Result<Vec<usize>> {
        if self.targets.is_empty() {
            return Ok((0..domains.len()).collect());
        }
        self.targets
            .iter()
            .map(|t| {
                domains
                    .iter()
                    .position(|d| d.domain_id() == t)
                    .ok_or_else(|| field("targets", format!("no domain named '{t}'")))
            })
            .collect()
    }
}
