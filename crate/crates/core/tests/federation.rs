mod common;

use std::ops::ControlFlow;

use fedpda::algorithms::{sgd_epochs, staralign_central_round, AlignConfig};
use fedpda::data::DomainDataset;
use fedpda::federation::{
    channel_pair, decode_message, encode_message, keep_going, run_federation, run_hub, serve_node,
    Aggregation, AvgGradient, FedMessage, FederationConfig, Link, NodeId, NodeSpec, Role,
    RoundCommand, SourceNode, TargetNode, TransportKind,
};
use fedpda::model::Model;
use fedpda::numerics::{GradientVector, ParamVector, Rng};
use fedpda::Error;

use common::{blobs, mlp, small_benchmark};
use proptest::prelude::*;

fn align(alpha: f64, tau: usize, rounds: usize) -> AlignConfig {
    AlignConfig {
        alpha,
        beta: 0.4,
        tau,
        rounds,
        batch_size: 12,
        first_order_per_step: false,
    }
}

fn star_nodes(domains: &[DomainDataset]) -> Vec<NodeSpec<'_>> {
    domains
        .iter()
        .enumerate()
        .map(|(k, d)| NodeSpec {
            id: NodeId(k as u32),
            role: if k == 0 { Role::Target } else { Role::Source },
            data: Some(d),
            seed: 7 + k as u64,
            initial_bn: None,
        })
        .collect()
}

#[test]
fn repeated_runs_are_bit_identical() {
    let domains = small_benchmark(3, 90);
    let model = mlp(4, &[6], 3);
    let initial = model.init_params(&mut Rng::new(1));
    for aggregation in [Aggregation::StarAlign, Aggregation::PcGrad, Aggregation::FedBn, Aggregation::FedAvg] {
        let cfg = FederationConfig {
            nodes: star_nodes(&domains),
            align: align(0.05, 3, 2),
            aggregation,
            transport: TransportKind::InProcess,
        };
        let a = run_federation(&model, &cfg, &initial, &mut keep_going).unwrap();
        let b = run_federation(&model, &cfg, &initial, &mut keep_going).unwrap();
        assert!(a.params.bit_eq(&b.params), "{aggregation:?}");
        assert_eq!(a.rounds_completed, 2);
        assert_eq!(a.history, b.history);
    }
}

fn source_messages(model: &impl Model, sources: &[DomainDataset], p: &ParamVector, cfg: &AlignConfig) -> Vec<AvgGradient> {
    sources
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let mut node = SourceNode::new(NodeId(k as u32 + 1), model, d, cfg.clone(), Rng::new(k as u64)).unwrap();
            node.source_round(p, 1).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn arrival_order_does_not_matter(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let model = mlp(3, &[5], 2);
        let mut rng = Rng::new(seed);
        let p = model.init_params(&mut rng);
        let sources: Vec<DomainDataset> = (0..4).map(|k| blobs(&mut rng, "s", 10, 3, 2, k as f64 * 0.3)).collect();
        let target = blobs(&mut rng, "t", 8, 3, 2, -0.4);
        let cfg = align(0.05, 3, 1);
        let msgs = source_messages(&model, &sources, &p, &cfg);
        let mut shuffled = msgs.clone();
        Rng::new(perm_seed).shuffle(&mut shuffled);
        let ids: Vec<NodeId> = msgs.iter().map(|m| m.node).collect();
        let mut a = TargetNode::new(&model, &target, cfg.clone(), Rng::new(9), ids.clone()).unwrap();
        let mut b = TargetNode::new(&model, &target, cfg, Rng::new(9), ids).unwrap();
        let x = a.target_round(&p, 1, msgs).unwrap();
        let y = b.target_round(&p, 1, shuffled).unwrap();
        prop_assert!(x.bit_eq(&y));
    }

    #[test]
    fn pcgrad_arrival_order_does_not_matter(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let model = mlp(3, &[5], 2);
        let mut rng = Rng::new(seed);
        let p = model.init_params(&mut rng);
        let sources: Vec<DomainDataset> = (0..3).map(|k| blobs(&mut rng, "s", 10, 3, 2, k as f64)).collect();
        let target = blobs(&mut rng, "t", 8, 3, 2, -0.4);
        let cfg = align(0.05, 2, 1);
        let msgs = source_messages(&model, &sources, &p, &cfg);
        let mut shuffled = msgs.clone();
        Rng::new(perm_seed).shuffle(&mut shuffled);
        let ids: Vec<NodeId> = msgs.iter().map(|m| m.node).collect();
        let mut a = TargetNode::new(&model, &target, cfg.clone(), Rng::new(9), ids.clone()).unwrap();
        let mut b = TargetNode::new(&model, &target, cfg, Rng::new(9), ids).unwrap();
        prop_assert!(a.pcgrad_round(&p, 1, msgs).unwrap().bit_eq(&b.pcgrad_round(&p, 1, shuffled).unwrap()));
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let domains = small_benchmark(3, 60);
    let model = mlp(4, &[6], 3);
    let initial = model.init_params(&mut Rng::new(2));
    for aggregation in [Aggregation::StarAlign, Aggregation::PcGrad, Aggregation::FedBn] {
        let cfg = FederationConfig {
            nodes: star_nodes(&domains),
            align: align(0.0, 4, 2),
            aggregation,
            transport: TransportKind::InProcess,
        };
        let out = run_federation(&model, &cfg, &initial, &mut keep_going).unwrap();
        assert!(out.params.bit_eq(&initial), "{aggregation:?}");
    }
}

#[test]
fn no_sources_reduces_to_the_target_pair() {
    let model = mlp(3, &[5, 4], 2);
    let mut rng = Rng::new(4);
    let p = model.init_params(&mut rng);
    let target = blobs(&mut rng, "t", 20, 3, 2, 0.0);
    let cfg = align(0.05, 1, 1);
    let mut node = TargetNode::new(&model, &target, cfg.clone(), Rng::new(3), vec![]).unwrap();
    let distributed = node.target_round(&p, 1, vec![]).unwrap();
    let central = staralign_central_round(&model, &p, &[], &target, &cfg, &mut Rng::new(3)).unwrap();
    assert!(distributed.bit_eq(&central));

    // and through the hub, with no links at all
    let nodes = vec![NodeSpec {
        id: NodeId(0),
        role: Role::Target,
        data: Some(&target),
        seed: 3,
        initial_bn: None,
    }];
    let fed = FederationConfig {
        nodes,
        align: cfg,
        aggregation: Aggregation::StarAlign,
        transport: TransportKind::InProcess,
    };
    let out = run_federation(&model, &fed, &p, &mut keep_going).unwrap();
    assert!(out.params.bit_eq(&central));
}

#[test]
fn fedavg_over_identical_nodes_is_local_sgd() {
    let model = mlp(3, &[5], 2);
    let mut rng = Rng::new(6);
    let p = model.init_params(&mut rng);
    let data = blobs(&mut rng, "d", 30, 3, 2, 0.2);
    let nodes: Vec<NodeSpec> = (0..3)
        .map(|k| NodeSpec {
            id: NodeId(k),
            role: Role::Source,
            data: Some(&data),
            seed: 99,
            initial_bn: None,
        })
        .collect();
    let cfg = FederationConfig {
        nodes,
        align: align(0.1, 5, 3),
        aggregation: Aggregation::FedAvg,
        transport: TransportKind::InProcess,
    };
    let out = run_federation(&model, &cfg, &p, &mut keep_going).unwrap();
    // one node, one stream: 3 rounds of 5 steps
    let single = sgd_epochs(&model, &p, &data, 0.1, 12, 15, &mut Rng::new(99)).unwrap();
    assert!(out.params.bit_eq(&single));
}

#[test]
fn fedbn_keeps_local_statistics_apart() {
    let domains = small_benchmark(3, 90);
    let model = mlp(4, &[6, 5], 3);
    let layout = model.layout();
    let initial = model.init_params(&mut Rng::new(8));
    let nodes: Vec<NodeSpec> = star_nodes(&domains).into_iter().map(|n| NodeSpec { role: Role::Source, ..n }).collect();
    let cfg = FederationConfig {
        nodes,
        align: align(0.05, 4, 3),
        aggregation: Aggregation::FedBn,
        transport: TransportKind::InProcess,
    };
    let out = run_federation(&model, &cfg, &initial, &mut keep_going).unwrap();
    assert_eq!(out.node_bn.len(), 3);
    let blocks: Vec<&Vec<f64>> = out.node_bn.values().collect();
    assert_ne!(blocks[0], blocks[1]);
    let bn = layout.bn_mask();
    let a = out.personalized(&model, NodeId(0)).unwrap();
    let b = out.personalized(&model, NodeId(2)).unwrap();
    for i in 0..a.len() {
        if !bn[i] {
            assert_eq!(a[i].to_bits(), b[i].to_bits());
        }
    }
    assert_eq!(layout.extract_bn(a.as_slice()), *blocks[0]);
}

/// Delivers the first `healthy` replies, then reports a dead peer.
struct Flaky<L> {
    inner: L,
    healthy: usize,
}

impl<L: Link> Link for Flaky<L> {
    fn send(&mut self, msg: &FedMessage) -> fedpda::Result<()> {
        self.inner.send(msg)
    }

    fn recv(&mut self) -> fedpda::Result<FedMessage> {
        if self.healthy == 0 {
            return Err(Error::Transport(std::io::Error::new(
                std::io::ErrorKind::ConnectionReset,
                "node went away",
            )));
        }
        self.healthy -= 1;
        self.inner.recv()
    }
}

#[test]
fn node_failure_aborts_with_last_aggregate() {
    let domains = small_benchmark(3, 60);
    let model = mlp(4, &[6], 3);
    let initial = model.init_params(&mut Rng::new(3));
    let cfg = FederationConfig {
        nodes: star_nodes(&domains),
        align: align(0.05, 2, 4),
        aggregation: Aggregation::StarAlign,
        transport: TransportKind::InProcess,
    };
    let mut after_round_one = None;
    let err = std::thread::scope(|s| {
        let mut links: Vec<Box<dyn Link>> = Vec::new();
        for (i, spec) in cfg.remote_nodes().into_iter().enumerate() {
            let (hub, mut node) = channel_pair();
            let healthy = if i == 1 { 1 } else { usize::MAX };
            links.push(Box::new(Flaky { inner: hub, healthy }));
            let (model, cfg, initial) = (&model, &cfg, &initial);
            s.spawn(move || serve_node(model, spec, &cfg.align, cfg.aggregation, initial, &mut node));
        }
        run_hub(&model, &cfg, links, &initial, &mut |r| {
            after_round_one.get_or_insert_with(|| r.params.clone());
            ControlFlow::Continue(())
        })
        .unwrap_err()
    });
    match err {
        Error::RoundAborted { round, resume_from, .. } => {
            assert_eq!(round, 2);
            assert!(resume_from.bit_eq(after_round_one.as_ref().unwrap()));
        }
        other => panic!("expected RoundAborted, got {other}"),
    }
}

#[test]
fn remote_node_without_data_is_rejected() {
    let domains = small_benchmark(3, 60);
    let model = mlp(4, &[6], 3);
    let initial = model.init_params(&mut Rng::new(3));
    let mut nodes = star_nodes(&domains);
    nodes[2].data = None;
    let cfg = FederationConfig {
        nodes,
        align: align(0.05, 2, 2),
        aggregation: Aggregation::StarAlign,
        transport: TransportKind::InProcess,
    };
    assert!(matches!(
        run_federation(&model, &cfg, &initial, &mut keep_going),
        Err(Error::Config(_))
    ));
}

/// Answers every broadcast with a gradient labelled for the wrong round.
fn stale_source(link: &mut dyn Link, dim: usize) {
    while let Ok(msg) = link.recv() {
        match msg {
            FedMessage::ModelBroadcast { round, .. } => {
                let reply = FedMessage::AvgGradient(AvgGradient {
                    round: round.saturating_sub(1),
                    node: NodeId(1),
                    grad: GradientVector::zeros(dim),
                });
                if link.send(&reply).is_err() {
                    return;
                }
            }
            FedMessage::RoundControl { command: RoundCommand::Stop, .. } => return,
            _ => {}
        }
    }
}

#[test]
fn stale_gradients_are_a_protocol_error() {
    let domains = small_benchmark(2, 60);
    let model = mlp(4, &[6], 3);
    let initial = model.init_params(&mut Rng::new(3));
    let cfg = FederationConfig {
        nodes: star_nodes(&domains),
        align: align(0.05, 2, 2),
        aggregation: Aggregation::StarAlign,
        transport: TransportKind::InProcess,
    };
    let err = std::thread::scope(|s| {
        let (hub, mut node) = channel_pair();
        let dim = model.num_params();
        s.spawn(move || stale_source(&mut node, dim));
        run_hub(&model, &cfg, vec![Box::new(hub)], &initial, &mut keep_going).unwrap_err()
    });
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn observer_can_stop_early() {
    let domains = small_benchmark(3, 60);
    let model = mlp(4, &[6], 3);
    let initial = model.init_params(&mut Rng::new(3));
    let cfg = FederationConfig {
        nodes: star_nodes(&domains),
        align: align(0.05, 2, 5),
        aggregation: Aggregation::StarAlign,
        transport: TransportKind::Socket,
    };
    let out = run_federation(&model, &cfg, &initial, &mut |r| {
        if r.round == 2 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert_eq!(out.rounds_completed, 2);
}

#[test]
fn config_validation() {
    let domains = small_benchmark(2, 30);
    let mut nodes = star_nodes(&domains);
    let model = mlp(4, &[6], 3);
    let initial = model.init_params(&mut Rng::new(0));
    nodes[1].role = Role::Target;
    let two_targets = FederationConfig {
        nodes: nodes.clone(),
        align: align(0.05, 1, 1),
        aggregation: Aggregation::StarAlign,
        transport: TransportKind::InProcess,
    };
    assert!(matches!(two_targets.validate(), Err(Error::Config(_))));
    nodes[1].role = Role::Source;
    nodes[1].id = NodeId(0);
    let dup = FederationConfig { nodes, ..two_targets.clone() };
    assert!(matches!(dup.validate(), Err(Error::Config(_))));
    let no_target = FederationConfig {
        nodes: star_nodes(&domains).into_iter().skip(1).collect(),
        ..two_targets
    };
    assert!(matches!(
        run_federation(&model, &no_target, &initial, &mut keep_going),
        Err(Error::Config(_))
    ));
}

/// CRC-32/IEEE computed bit by bit.
fn crc32_reference(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let lsb = crc & 1;
            crc >>= 1;
            if lsb == 1 {
                crc ^= 0xedb8_8320;
            }
        }
    }
    !crc
}

#[test]
fn avg_gradient_golden_bytes() {
    let msg = FedMessage::AvgGradient(AvgGradient {
        round: 3,
        node: NodeId(2),
        grad: GradientVector::new(vec![1.5, -2.0]),
    });
    let mut expected = vec![b'F', b'P', b'D', b'A', 1, 2];
    expected.extend_from_slice(&[3, 0, 0, 0]);
    expected.extend_from_slice(&[2, 0, 0, 0]);
    expected.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
    expected.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xf8, 0x3f]);
    expected.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 0xc0]);
    let crc = crc32_reference(&expected);
    expected.extend_from_slice(&crc.to_le_bytes());
    assert_eq!(encode_message(&msg), expected);
    assert_eq!(decode_message(&expected).unwrap(), msg);
}
