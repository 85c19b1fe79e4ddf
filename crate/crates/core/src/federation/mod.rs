//! Hub-and-spoke federation: source nodes never share data, only averaged
//! gradients (alignment) or locally trained models (FedAvg / FedBN).
//!
//! The hub sits with the target. Each remote node talks to it over a
//! [`Link`], either an in-process channel or a TCP socket; both carry the
//! same binary frames, so a run is bit-identical across transports.

mod node;
mod protocol;
mod transport;

pub use node::{SourceNode, TargetNode, TargetRule};
pub use protocol::{
    decode_message, decode_prefix, encode_message, read_message, write_message, AvgGradient,
    DecodeError, FedMessage, NodeId, RoundCommand, CRC_LEN, HEADER_LEN, MAGIC,
    MAX_PAYLOAD_ELEMENTS, VERSION,
};
pub use transport::{channel_pair, ChannelLink, Link, TcpLink};

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::ops::ControlFlow;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::algorithms::AlignConfig;
use crate::data::DomainDataset;
use crate::error::{check_len, Error, Result};
use crate::model::Model;
use crate::numerics::{mean_vectors, ParamVector, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedbn")]
    FedBn,
    #[serde(rename = "staralign")]
    StarAlign,
    #[serde(rename = "pcgrad")]
    PcGrad,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Aggregation::FedAvg),
            "fedbn" => Ok(Aggregation::FedBn),
            "staralign" => Ok(Aggregation::StarAlign),
            "pcgrad" => Ok(Aggregation::PcGrad),
            other => Err(Error::Config(format!("unknown aggregation '{other}'"))),
        }
    }
}

impl Aggregation {
    fn target_rule(self) -> Option<TargetRule> {
        match self {
            Aggregation::StarAlign => Some(TargetRule::StarAlign),
            Aggregation::PcGrad => Some(TargetRule::PcGrad),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    InProcess,
    /// TCP over the loopback interface, one socket per remote node.
    Socket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone)]
pub struct NodeSpec<'a> {
    pub id: NodeId,
    pub role: Role,
    /// Local data. Only needed where the node actually runs.
    pub data: Option<&'a DomainDataset>,
    pub seed: u64,
    /// Starting batch-norm block for FedBN; defaults to the initial model's.
    pub initial_bn: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FederationConfig<'a> {
    pub nodes: Vec<NodeSpec<'a>>,
    pub align: AlignConfig,
    pub aggregation: Aggregation,
    pub transport: TransportKind,
}

impl<'a> FederationConfig<'a> {
    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        let mut ids: Vec<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("node ids must be unique".into()));
        }
        let targets = self.nodes.iter().filter(|n| n.role == Role::Target).count();
        if targets > 1 {
            return Err(Error::Config("at most one target node".into()));
        }
        match self.aggregation {
            Aggregation::StarAlign | Aggregation::PcGrad if targets == 0 => Err(Error::Config(
                "gradient alignment needs a target node".into(),
            )),
            _ if self.nodes.is_empty() => Err(Error::Config("federation has no nodes".into())),
            _ => Ok(()),
        }
    }

    pub fn target(&self) -> Option<&NodeSpec<'a>> {
        self.nodes.iter().find(|n| n.role == Role::Target)
    }

    /// Nodes reached over links: the sources for alignment, every node for
    /// model averaging. Sorted by id.
    pub fn remote_nodes(&self) -> Vec<&NodeSpec<'a>> {
        let mut out: Vec<&NodeSpec<'a>> = match self.aggregation.target_rule() {
            Some(_) => self.nodes.iter().filter(|n| n.role == Role::Source).collect(),
            None => self.nodes.iter().collect(),
        };
        out.sort_by_key(|n| n.id);
        out
    }
}

/// Passed to the observer after every completed round.
#[derive(Debug)]
pub struct RoundReport<'r> {
    pub round: u32,
    /// The model the target would deploy after this round.
    pub params: &'r ParamVector,
    /// `‖θ_new − θ_old‖` of the aggregated model.
    pub update_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub update_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    /// The target's model: `θ_T` for alignment, the personalized model for
    /// FedBN with a target node, otherwise the global model.
    pub params: ParamVector,
    /// Aggregated model (equal to `params` for alignment).
    pub global: ParamVector,
    /// Per-node batch-norm blocks after FedBN; empty otherwise.
    pub node_bn: BTreeMap<NodeId, Vec<f64>>,
    pub rounds_completed: u32,
    pub history: Vec<RoundMetrics>,
}

impl FederationOutcome {
    /// The global model with `node`'s own batch-norm block swapped in.
    pub fn personalized<M: Model + ?Sized>(&self, model: &M, node: NodeId) -> Result<ParamVector> {
        let mut p = self.global.clone();
        if let Some(bn) = self.node_bn.get(&node) {
            model.layout().insert_bn(p.as_mut_slice(), bn)?;
        }
        Ok(p)
    }
}

/// Summary returned by a remote node when the hub stops it.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSummary {
    pub id: NodeId,
    pub rounds: u32,
    pub local_bn: Option<Vec<f64>>,
}

fn initial_bn<M: Model + ?Sized>(model: &M, spec: &NodeSpec<'_>, initial: &ParamVector) -> Result<Vec<f64>> {
    match &spec.initial_bn {
        Some(bn) => Ok(bn.clone()),
        None => Ok(model.layout().extract_bn(initial.as_slice())),
    }
}

/// Runs one remote node until the hub sends a stop command.
pub fn serve_node<M: Model + ?Sized>(
    model: &M,
    spec: &NodeSpec<'_>,
    align: &AlignConfig,
    aggregation: Aggregation,
    initial: &ParamVector,
    link: &mut dyn Link,
) -> Result<NodeSummary> {
    let data = spec
        .data
        .ok_or_else(|| Error::Config(format!("{} has no local data", spec.id)))?;
    let mut node = SourceNode::new(spec.id, model, data, align.clone(), Rng::new(spec.seed))?;
    if aggregation == Aggregation::FedBn && model.layout().has_batch_norm() {
        node = node.with_local_bn(initial_bn(model, spec, initial)?)?;
    }
    let mut rounds = 0;
    loop {
        let reply = match link.recv()? {
            FedMessage::ModelBroadcast { round, params } => {
                rounds += 1;
                match aggregation {
                    Aggregation::StarAlign | Aggregation::PcGrad => {
                        FedMessage::AvgGradient(node.source_round(&params, round)?)
                    }
                    Aggregation::FedAvg | Aggregation::FedBn => FedMessage::ModelUpload {
                        round,
                        node: spec.id,
                        params: node.local_training_round(&params, round, aggregation == Aggregation::FedBn)?,
                    },
                }
            }
            FedMessage::RoundControl {
                command: RoundCommand::Stop,
                ..
            } => {
                return Ok(NodeSummary {
                    id: spec.id,
                    rounds,
                    local_bn: node.local_bn().map(<[f64]>::to_vec),
                })
            }
            FedMessage::RoundControl { .. } => continue,
            other => {
                return Err(Error::Protocol(format!(
                    "{} cannot handle {}",
                    spec.id,
                    other.kind()
                )))
            }
        };
        link.send(&reply)?;
    }
}

fn abort(round: u32, err: Error, resume_from: &ParamVector) -> Error {
    Error::RoundAborted {
        round,
        reason: err.to_string(),
        resume_from: Box::new(resume_from.clone()),
    }
}

fn stop_all(links: &mut [Box<dyn Link + '_>], round: u32) {
    for link in links.iter_mut() {
        let _ = link.send(&FedMessage::RoundControl {
            round,
            command: RoundCommand::Stop,
        });
    }
}

/// Drives the rounds from the hub side over already-connected links, one
/// per remote node. Finishes by sending every node a stop command.
///
/// A link failure aborts with [`Error::RoundAborted`], which carries the last
/// aggregated model so a later run can resume from it. The observer may end
/// the run early by returning `ControlFlow::Break`.
pub fn run_hub<M: Model + ?Sized>(
    model: &M,
    cfg: &FederationConfig<'_>,
    mut links: Vec<Box<dyn Link + '_>>,
    initial: &ParamVector,
    observer: &mut dyn FnMut(&RoundReport<'_>) -> ControlFlow<()>,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    check_len(model.num_params(), initial.len())?;
    let remote: Vec<NodeId> = cfg.remote_nodes().iter().map(|n| n.id).collect();
    if links.len() != remote.len() {
        return Err(Error::Config(format!(
            "{} links for {} remote nodes",
            links.len(),
            remote.len()
        )));
    }
    let result = match cfg.aggregation.target_rule() {
        Some(rule) => align_rounds(model, cfg, rule, &mut links, &remote, initial, observer),
        None => averaging_rounds(model, cfg, &mut links, &remote, initial, observer),
    };
    let last_round = result.as_ref().map(|o| o.rounds_completed).unwrap_or(0);
    stop_all(&mut links, last_round + 1);
    result
}

fn broadcast(links: &mut [Box<dyn Link + '_>], round: u32, params: &ParamVector) -> Result<()> {
    let msg = FedMessage::ModelBroadcast {
        round,
        params: params.clone(),
    };
    for link in links.iter_mut() {
        link.send(&msg)?;
    }
    Ok(())
}

fn align_rounds<M: Model + ?Sized>(
    model: &M,
    cfg: &FederationConfig<'_>,
    rule: TargetRule,
    links: &mut [Box<dyn Link + '_>],
    remote: &[NodeId],
    initial: &ParamVector,
    observer: &mut dyn FnMut(&RoundReport<'_>) -> ControlFlow<()>,
) -> Result<FederationOutcome> {
    let spec = cfg.target().expect("validated");
    let data = spec
        .data
        .ok_or_else(|| Error::Config("the target node needs its labelled data".into()))?;
    let mut target = TargetNode::new(model, data, cfg.align.clone(), Rng::new(spec.seed), remote.to_vec())?;
    let mut theta = initial.clone();
    let mut history = Vec::new();
    for round in 1..=cfg.align.rounds as u32 {
        broadcast(links, round, &theta).map_err(|e| abort(round, e, &theta))?;
        let mut received = Vec::with_capacity(links.len());
        for link in links.iter_mut() {
            match link.recv().map_err(|e| abort(round, e, &theta))? {
                FedMessage::AvgGradient(g) => received.push(g),
                other => {
                    return Err(Error::Protocol(format!(
                        "expected AvgGradient, got {}",
                        other.kind()
                    )))
                }
            }
        }
        let next = target.round(rule, &theta, round, received)?;
        let update_norm = theta.delta_to(&next)?.norm();
        theta = next;
        history.push(RoundMetrics { round, update_norm });
        let report = RoundReport {
            round,
            params: &theta,
            update_norm,
        };
        if observer(&report).is_break() {
            break;
        }
    }
    Ok(FederationOutcome {
        params: theta.clone(),
        global: theta,
        node_bn: BTreeMap::new(),
        rounds_completed: history.len() as u32,
        history,
    })
}

fn averaging_rounds<M: Model + ?Sized>(
    model: &M,
    cfg: &FederationConfig<'_>,
    links: &mut [Box<dyn Link + '_>],
    remote: &[NodeId],
    initial: &ParamVector,
    observer: &mut dyn FnMut(&RoundReport<'_>) -> ControlFlow<()>,
) -> Result<FederationOutcome> {
    let layout = model.layout();
    let keep_bn = cfg.aggregation == Aggregation::FedBn && layout.has_batch_norm();
    let mut node_bn = BTreeMap::new();
    if keep_bn {
        for spec in cfg.remote_nodes() {
            node_bn.insert(spec.id, initial_bn(model, spec, initial)?);
        }
    }
    let target_id = cfg.target().map(|t| t.id);
    let deployable = |global: &ParamVector, node_bn: &BTreeMap<NodeId, Vec<f64>>| -> Result<ParamVector> {
        let mut p = global.clone();
        if let Some(bn) = target_id.and_then(|id| node_bn.get(&id)) {
            layout.insert_bn(p.as_mut_slice(), bn)?;
        }
        Ok(p)
    };

    let mut global = initial.clone();
    let mut history = Vec::new();
    let mut deployed = deployable(&global, &node_bn)?;
    for round in 1..=cfg.align.rounds as u32 {
        broadcast(links, round, &global).map_err(|e| abort(round, e, &global))?;
        let mut uploads = BTreeMap::new();
        for link in links.iter_mut() {
            match link.recv().map_err(|e| abort(round, e, &global))? {
                FedMessage::ModelUpload {
                    round: r,
                    node,
                    params,
                } => {
                    if r != round {
                        return Err(Error::Protocol(format!(
                            "{node} uploaded for round {r} during round {round}"
                        )));
                    }
                    if remote.binary_search(&node).is_err() {
                        return Err(Error::Protocol(format!("unexpected upload from {node}")));
                    }
                    check_len(global.len(), params.len())?;
                    if uploads.insert(node, params).is_some() {
                        return Err(Error::Protocol(format!("duplicate upload from {node}")));
                    }
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "expected ModelUpload, got {}",
                        other.kind()
                    )))
                }
            }
        }
        if keep_bn {
            for (id, p) in &uploads {
                node_bn.insert(*id, layout.extract_bn(p.as_slice()));
            }
        }
        let models: Vec<ParamVector> = uploads.into_values().collect();
        let next = mean_vectors(&models)?;
        let update_norm = global.delta_to(&next)?.norm();
        global = next;
        deployed = deployable(&global, &node_bn)?;
        history.push(RoundMetrics { round, update_norm });
        let report = RoundReport {
            round,
            params: &deployed,
            update_norm,
        };
        if observer(&report).is_break() {
            break;
        }
    }
    Ok(FederationOutcome {
        params: deployed,
        global,
        node_bn,
        rounds_completed: history.len() as u32,
        history,
    })
}

/// Runs a whole federation inside this process: one thread per remote node
/// plus the hub on the calling thread.
pub fn run_federation<M: Model + ?Sized>(
    model: &M,
    cfg: &FederationConfig<'_>,
    initial: &ParamVector,
    observer: &mut dyn FnMut(&RoundReport<'_>) -> ControlFlow<()>,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    check_len(model.num_params(), initial.len())?;
    let remote = cfg.remote_nodes();
    for spec in &remote {
        if spec.data.is_none() {
            return Err(Error::Config(format!("{} has no local data", spec.id)));
        }
    }
    std::thread::scope(|scope| {
        let mut hub_links: Vec<Box<dyn Link + '_>> = Vec::with_capacity(remote.len());
        let mut workers = Vec::with_capacity(remote.len());
        for spec in &remote {
            let spec: &NodeSpec<'_> = spec;
            match cfg.transport {
                TransportKind::InProcess => {
                    let (hub_end, mut node_end) = channel_pair();
                    hub_links.push(Box::new(hub_end));
                    workers.push(scope.spawn(move || {
                        serve_node(model, spec, &cfg.align, cfg.aggregation, initial, &mut node_end)
                    }));
                }
                TransportKind::Socket => {
                    let listener = TcpListener::bind("127.0.0.1:0")?;
                    let addr = listener.local_addr()?;
                    workers.push(scope.spawn(move || {
                        let mut link = TcpLink::accept(&listener)?;
                        serve_node(model, spec, &cfg.align, cfg.aggregation, initial, &mut link)
                    }));
                    hub_links.push(Box::new(TcpLink::connect(addr, 50, Duration::from_millis(20))?));
                }
            }
        }
        let outcome = run_hub(model, cfg, hub_links, initial, observer);
        let mut node_errors = Vec::new();
        for w in workers {
            match w.join() {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => node_errors.push(e.to_string()),
                Err(_) => node_errors.push("node thread panicked".into()),
            }
        }
        match outcome {
            Err(Error::RoundAborted {
                round,
                reason,
                resume_from,
            }) if !node_errors.is_empty() => Err(Error::RoundAborted {
                round,
                reason: format!("{reason} ({})", node_errors.join("; ")),
                resume_from,
            }),
            other => other,
        }
    })
}

/// Observer that never stops the run.
pub fn keep_going(_: &RoundReport<'_>) -> ControlFlow<()> {
    ControlFlow::Continue(())
}
