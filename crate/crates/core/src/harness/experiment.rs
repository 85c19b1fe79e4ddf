//! Leave-one-domain-out sweeps: pre-train on the sources, deploy, adapt,
//! snapshot, select on validation and report on test.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{finetune, staralign_central_round, tent_supervised, AlignConfig};
use crate::data::{count_of, split, subsample_labelled, subsample_labelled_count, DomainDataset};
use crate::error::{check_len, Error, Result};
use crate::federation::{
    keep_going, run_federation, Aggregation, FederationConfig, NodeId, NodeSpec, Role,
    TransportKind,
};
use crate::model::{EvalMetrics, Mlp, Model};
use crate::numerics::{ParamVector, Rng};

use super::config::{AdaptMethod, ExperimentConfig, LabelledBasis};

/// One selected snapshot of one method on one held-out target and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: String,
    pub target: String,
    pub seed: u64,
    pub snapshot_round: u32,
    pub val_metric: f64,
    pub test_accuracy: f64,
    pub test_weighted_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub round: u32,
    pub val_metric: f64,
    pub test: EvalMetrics,
    pub params: ParamVector,
}

/// The held-out domain's partitions as seen by one run.
#[derive(Debug, Clone)]
pub struct TargetSplits {
    pub labelled: DomainDataset,
    pub val: DomainDataset,
    pub test: DomainDataset,
}

/// Everything fixed for a (target, seed) pair once pre-training is done.
#[derive(Debug, Clone)]
pub struct Cell {
    pub model: Mlp,
    pub target: TargetSplits,
    /// Source training splits, ordered by node id `1..=S`.
    pub sources: Vec<DomainDataset>,
    /// Deployed model (averaged source batch-norm for FedBN pre-training).
    pub deployed: ParamVector,
    /// Each source's own batch-norm block after FedBN pre-training.
    pub source_bn: BTreeMap<NodeId, Vec<f64>>,
    pub seed: u64,
}

pub const TARGET_NODE: NodeId = NodeId(0);

pub fn source_node_id(k: usize) -> NodeId {
    NodeId(k as u32 + 1)
}

/// Key mixing for deterministic per-purpose random streams.
fn stream(seed: u64, parts: &[u64]) -> Rng {
    parts.iter().fold(Rng::new(seed), |r, &p| r.derive(p))
}

const PURPOSE_LABELLED: u64 = 1;
const PURPOSE_INIT: u64 = 2;
const PURPOSE_PRETRAIN: u64 = 3;
const PURPOSE_ADAPT: u64 = 4;

/// Train/val/test partitions of every domain; independent of the run seed.
pub fn partition_domains(
    cfg: &ExperimentConfig,
    domains: &[DomainDataset],
) -> Result<Vec<(DomainDataset, DomainDataset, DomainDataset)>> {
    domains
        .iter()
        .enumerate()
        .map(|(k, d)| split(&mut Rng::new(cfg.split_seed).derive(k as u64), d, &cfg.split))
        .collect()
}

fn labelled_subset(cfg: &ExperimentConfig, full: &DomainDataset, train: &DomainDataset, rng: &mut Rng) -> Result<DomainDataset> {
    let frac = cfg.split.target_labelled_frac;
    match cfg.labelled_basis {
        LabelledBasis::TrainSplit => subsample_labelled(rng, train, frac),
        LabelledBasis::Dataset => {
            let m = count_of(frac, full.len());
            if m > train.len() {
                return Err(Error::Config(format!(
                    "split.target_labelled_frac: {m} labelled samples exceed the training split of {}",
                    train.len()
                )));
            }
            subsample_labelled_count(rng, train, m)
        }
    }
}

fn node_seed(seed: u64, parts: &[u64]) -> u64 {
    stream(seed, parts).next_u64()
}

/// Builds the target splits and pre-trains on the sources.
pub fn prepare_cell(
    cfg: &ExperimentConfig,
    domains: &[DomainDataset],
    partitions: &[(DomainDataset, DomainDataset, DomainDataset)],
    target_idx: usize,
    seed: u64,
) -> Result<Cell> {
    let target = &domains[target_idx];
    let model = Mlp::new(cfg.architecture_for(target.feature_dim(), target.num_classes())?)?;
    let init = model.init_params(&mut stream(seed, &[PURPOSE_INIT, target_idx as u64]));
    let sources = source_splits(partitions, target_idx);
    let nodes = sources
        .iter()
        .enumerate()
        .map(|(k, d)| NodeSpec {
            id: source_node_id(k),
            role: Role::Source,
            data: Some(d),
            seed: node_seed(seed, &[PURPOSE_PRETRAIN, target_idx as u64, k as u64]),
            initial_bn: None,
        })
        .collect();
    let fed = FederationConfig {
        nodes,
        align: cfg.pretrain.align(),
        aggregation: cfg.pretrain.aggregation,
        transport: TransportKind::InProcess,
    };
    let outcome = run_federation(&model, &fed, &init, &mut keep_going)?;
    cell_from_parts(cfg, domains, partitions, target_idx, seed, outcome.global, outcome.node_bn)
}

fn source_splits(partitions: &[(DomainDataset, DomainDataset, DomainDataset)], target_idx: usize) -> Vec<DomainDataset> {
    partitions
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != target_idx)
        .map(|(_, p)| p.0.clone())
        .collect()
}

/// A cell around an already pre-trained model, e.g. from a checkpoint.
pub fn cell_from_parts(
    cfg: &ExperimentConfig,
    domains: &[DomainDataset],
    partitions: &[(DomainDataset, DomainDataset, DomainDataset)],
    target_idx: usize,
    seed: u64,
    deployed: ParamVector,
    source_bn: BTreeMap<NodeId, Vec<f64>>,
) -> Result<Cell> {
    let target = &domains[target_idx];
    let (train, val, test) = &partitions[target_idx];
    let labelled = labelled_subset(
        cfg,
        target,
        train,
        &mut stream(seed, &[PURPOSE_LABELLED, target_idx as u64]),
    )?;
    let model = Mlp::new(cfg.architecture_for(target.feature_dim(), target.num_classes())?)?;
    check_len(model.num_params(), deployed.len())?;
    Ok(Cell {
        model,
        target: TargetSplits {
            labelled,
            val: val.clone(),
            test: test.clone(),
        },
        sources: source_splits(partitions, target_idx),
        deployed,
        source_bn,
        seed,
    })
}

struct Evaluator<'c> {
    model: &'c Mlp,
    val: &'c DomainDataset,
    test: &'c DomainDataset,
    weighted: bool,
}

impl Evaluator<'_> {
    fn snapshot(&self, round: u32, params: &ParamVector) -> Result<Snapshot> {
        let v = self.model.evaluate(params, self.val)?;
        Ok(Snapshot {
            round,
            val_metric: if self.weighted { v.weighted_accuracy } else { v.accuracy },
            test: self.model.evaluate(params, self.test)?,
            params: params.clone(),
        })
    }
}

/// Runs one adaptation method from the deployed model and returns every
/// snapshot taken along the way.
pub fn run_method(cfg: &ExperimentConfig, cell: &Cell, target_idx: usize, method: AdaptMethod) -> Result<Vec<Snapshot>> {
    let eval = Evaluator {
        model: &cell.model,
        val: &cell.target.val,
        test: &cell.target.test,
        weighted: cfg.weighted_selection(),
    };
    let model = &cell.model;
    let labelled = &cell.target.labelled;
    let align = &cfg.adapt;
    let mut rng = stream(cell.seed, &[PURPOSE_ADAPT, target_idx as u64, method as u64]);
    let interval = cfg.snapshot_interval as u32;
    let mut snaps = Vec::new();

    let centralized = |start: ParamVector,
                           rng: &mut Rng,
                           step: &mut dyn FnMut(&ParamVector, &mut Rng) -> Result<ParamVector>|
     -> Result<Vec<Snapshot>> {
        let mut theta = start;
        let mut out = Vec::new();
        for round in 1..=align.rounds as u32 {
            theta = step(&theta, rng)?;
            if round % interval == 0 {
                out.push(eval.snapshot(round, &theta)?);
            }
        }
        Ok(out)
    };

    match method {
        AdaptMethod::Deployed => snaps.push(eval.snapshot(0, &cell.deployed)?),
        AdaptMethod::FedbnTargetBn => {
            let p = model.bn_stat_refresh(&cell.deployed, labelled)?;
            snaps.push(eval.snapshot(0, &p)?);
        }
        AdaptMethod::Finetune => {
            snaps = centralized(cell.deployed.clone(), &mut rng, &mut |p, r| {
                finetune(model, p, labelled, align, r)
            })?;
        }
        AdaptMethod::TentSupervised => {
            snaps = centralized(cell.deployed.clone(), &mut rng, &mut |p, r| {
                tent_supervised(model, p, labelled, align, r)
            })?;
        }
        AdaptMethod::FromScratch => {
            let init = model.init_params(&mut rng);
            snaps = centralized(init, &mut rng, &mut |p, r| finetune(model, p, labelled, align, r))?;
        }
        AdaptMethod::StaralignCentral => {
            let refs: Vec<&DomainDataset> = cell.sources.iter().collect();
            snaps = centralized(cell.deployed.clone(), &mut rng, &mut |p, r| {
                let mut theta = p.clone();
                for _ in 0..align.tau {
                    theta = staralign_central_round(model, &theta, &refs, labelled, align, r)?;
                }
                Ok(theta)
            })?;
        }
        AdaptMethod::FedpdaFedbn | AdaptMethod::FedpdaPcgrad | AdaptMethod::Staralign => {
            let aggregation = match method {
                AdaptMethod::FedpdaFedbn => Aggregation::FedBn,
                AdaptMethod::FedpdaPcgrad => Aggregation::PcGrad,
                _ => Aggregation::StarAlign,
            };
            let fed = adaptation_federation(cell, align, aggregation, &mut rng);
            let mut failure = None;
            run_federation(model, &fed, &cell.deployed, &mut |report| {
                if report.round % interval == 0 {
                    match eval.snapshot(report.round, report.params) {
                        Ok(s) => snaps.push(s),
                        Err(e) => {
                            failure = Some(e);
                            return ControlFlow::Break(());
                        }
                    }
                }
                ControlFlow::Continue(())
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
        }
    }
    Ok(snaps)
}

/// The target plus every source, ready for an adaptation federation. Under
/// FedBN the sources resume from their own pre-trained batch-norm blocks.
pub fn adaptation_federation<'c>(
    cell: &'c Cell,
    align: &AlignConfig,
    aggregation: Aggregation,
    rng: &mut Rng,
) -> FederationConfig<'c> {
    let mut nodes = vec![NodeSpec {
        id: TARGET_NODE,
        role: Role::Target,
        data: Some(&cell.target.labelled),
        seed: rng.next_u64(),
        initial_bn: None,
    }];
    for (k, d) in cell.sources.iter().enumerate() {
        let id = source_node_id(k);
        nodes.push(NodeSpec {
            id,
            role: Role::Source,
            data: Some(d),
            seed: rng.next_u64(),
            initial_bn: cell.source_bn.get(&id).cloned(),
        });
    }
    FederationConfig {
        nodes,
        align: align.clone(),
        aggregation,
        transport: TransportKind::InProcess,
    }
}

/// The `count` snapshots with the highest validation metric, best first;
/// ties go to the earlier round. Test metrics play no part.
pub fn select_snapshots(snaps: &[Snapshot], count: usize) -> Vec<&Snapshot> {
    let mut order: Vec<&Snapshot> = snaps.iter().collect();
    order.sort_by(|a, b| {
        b.val_metric
            .total_cmp(&a.val_metric)
            .then(a.round.cmp(&b.round))
    });
    order.truncate(count);
    order
}

fn records_for(
    method: AdaptMethod,
    target: &str,
    seed: u64,
    snaps: &[Snapshot],
    count: usize,
) -> Vec<ResultRecord> {
    select_snapshots(snaps, count)
        .into_iter()
        .map(|s| ResultRecord {
            method: method.as_str().to_string(),
            target: target.to_string(),
            seed,
            snapshot_round: s.round,
            val_metric: s.val_metric,
            test_accuracy: s.test.accuracy,
            test_weighted_accuracy: s.test.weighted_accuracy,
        })
        .collect()
}

/// Loads the configured domains (CSV paths relative to `base`) and runs
/// the sweep.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let domains = cfg.load_domains(base)?;
    run_experiment_on(cfg, &domains)
}

/// Leave-one-domain-out over `domains`: for each held-out target and seed,
/// pre-train, then run every configured method. Records come back ordered
/// by target, seed, method and selection rank.
pub fn run_experiment_on(cfg: &ExperimentConfig, domains: &[DomainDataset]) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    if domains.len() < 2 {
        return Err(Error::Config("leave-one-domain-out needs at least two domains".into()));
    }
    let partitions = partition_domains(cfg, domains)?;
    let targets = cfg.target_indices(domains)?;
    let cells: Vec<(usize, u64)> = targets
        .iter()
        .flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let run_cell = |&(t, seed): &(usize, u64)| -> Result<Vec<ResultRecord>> {
        let cell = prepare_cell(cfg, domains, &partitions, t, seed)?;
        let mut out = Vec::new();
        for &method in &cfg.methods {
            let snaps = run_method(cfg, &cell, t, method)?;
            out.extend(records_for(method, domains[t].domain_id(), seed, &snaps, cfg.snapshot_count));
        }
        Ok(out)
    };
    let per_cell: Vec<Result<Vec<ResultRecord>>> = if cfg.parallel {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };
    let mut records = Vec::new();
    for r in per_cell {
        records.extend(r?);
    }
    Ok(records)
}

pub fn write_records(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}
