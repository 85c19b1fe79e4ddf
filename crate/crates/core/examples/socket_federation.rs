//! The same federation over loopback TCP and over in-process channels.
//! Both carry identical frames, so the results match bit for bit.

use fedpda::algorithms::AlignConfig;
use fedpda::data::BenchmarkSpec;
use fedpda::federation::{
    keep_going, run_federation, Aggregation, FederationConfig, NodeId, NodeSpec, Role,
    TransportKind,
};
use fedpda::model::{Mlp, MlpArchitecture};
use fedpda::numerics::Rng;

fn main() -> fedpda::Result<()> {
    let spec = BenchmarkSpec {
        num_domains: 3,
        samples_per_domain: 300,
        ..BenchmarkSpec::default()
    };
    let domains = spec.build()?;
    let model = Mlp::new(MlpArchitecture::new(spec.feature_dim, vec![16], spec.num_classes, 0)?)?;
    let initial = model.init_params(&mut Rng::new(5));

    let run = |transport: TransportKind, aggregation: Aggregation| {
        let nodes = domains
            .iter()
            .enumerate()
            .map(|(k, d)| NodeSpec {
                id: NodeId(k as u32),
                role: if k == 0 { Role::Target } else { Role::Source },
                data: Some(d),
                seed: k as u64,
                initial_bn: None,
            })
            .collect();
        let fed = FederationConfig {
            nodes,
            align: AlignConfig {
                tau: 5,
                rounds: 4,
                ..AlignConfig::default()
            },
            aggregation,
            transport,
        };
        run_federation(&model, &fed, &initial, &mut keep_going)
    };

    for aggregation in [Aggregation::StarAlign, Aggregation::PcGrad, Aggregation::FedBn] {
        let local = run(TransportKind::InProcess, aggregation)?;
        let tcp = run(TransportKind::Socket, aggregation)?;
        println!(
            "{aggregation:?}: {} rounds, bit-identical across transports: {}",
            tcp.rounds_completed,
            local.params.bit_eq(&tcp.params)
        );
    }
    Ok(())
}
