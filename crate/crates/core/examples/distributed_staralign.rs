//! Distributed alignment: three source nodes, each on its own thread,
//! send averaged gradients to the target, which never sees their data.
//!
//! ```text
//! cargo run --release --example distributed_staralign
//! ```

use std::ops::ControlFlow;

use fedpda::algorithms::{erm, AlignConfig};
use fedpda::data::{split, subsample_labelled, BenchmarkSpec, DomainDataset, SplitSpec};
use fedpda::federation::{
    run_federation, Aggregation, FederationConfig, NodeId, NodeSpec, Role, TransportKind,
};
use fedpda::model::{Mlp, MlpArchitecture, Model};
use fedpda::numerics::Rng;

fn main() -> fedpda::Result<()> {
    let spec = BenchmarkSpec {
        samples_per_domain: 800,
        ..BenchmarkSpec::default()
    };
    let domains = spec.build()?;
    let mut rng = Rng::new(1);
    let splits: Vec<_> = domains
        .iter()
        .map(|d| split(&mut rng, d, &SplitSpec::default()))
        .collect::<fedpda::Result<_>>()?;
    let (target_train, _, target_test) = &splits[0];
    let labelled = subsample_labelled(&mut rng, target_train, 0.05)?;
    let sources: Vec<&DomainDataset> = splits[1..].iter().map(|s| &s.0).collect();

    let model = Mlp::new(MlpArchitecture::new(spec.feature_dim, vec![32], spec.num_classes, 0)?)?;
    let init = model.init_params(&mut rng);
    let deployed = erm(&model, &init, &sources, 0.05, 32, 3000, &mut rng)?;

    let mut nodes = vec![NodeSpec {
        id: NodeId(0),
        role: Role::Target,
        data: Some(&labelled),
        seed: 100,
        initial_bn: None,
    }];
    for (k, d) in sources.iter().enumerate() {
        nodes.push(NodeSpec {
            id: NodeId(k as u32 + 1),
            role: Role::Source,
            data: Some(d),
            seed: 101 + k as u64,
            initial_bn: None,
        });
    }
    let fed = FederationConfig {
        nodes,
        align: AlignConfig {
            tau: 20,
            rounds: 10,
            batch_size: 16,
            ..AlignConfig::default()
        },
        aggregation: Aggregation::StarAlign,
        transport: TransportKind::InProcess,
    };

    let before = model.evaluate(&deployed, target_test)?;
    println!(
        "deployed: accuracy {:.3}, weighted {:.3}",
        before.accuracy, before.weighted_accuracy
    );
    println!("round  update norm  weighted acc");
    let outcome = run_federation(&model, &fed, &deployed, &mut |r| {
        let m = model.evaluate(r.params, target_test).expect("evaluation");
        println!("{:>5}  {:>11.5}  {:>12.3}", r.round, r.update_norm, m.weighted_accuracy);
        ControlFlow::Continue(())
    })?;
    println!("{} rounds completed", outcome.rounds_completed);
    Ok(())
}
