//! Centralized source-target alignment with direct access to every domain,
//! next to plain fine-tuning on the few labelled target samples.
//!
//! ```text
//! cargo run --release --example staralign_central
//! ```

use fedpda::algorithms::{erm, finetune, staralign_central_round, AlignConfig};
use fedpda::data::{split, subsample_labelled, BenchmarkSpec, DomainDataset, SplitSpec};
use fedpda::model::{Mlp, MlpArchitecture, Model};
use fedpda::numerics::Rng;

fn main() -> fedpda::Result<()> {
    let spec = BenchmarkSpec {
        samples_per_domain: 800,
        class_prior: None,
        ..BenchmarkSpec::default()
    };
    let domains = spec.build()?;
    let mut rng = Rng::new(0);
    let splits: Vec<_> = domains
        .iter()
        .map(|d| split(&mut rng, d, &SplitSpec::default()))
        .collect::<fedpda::Result<_>>()?;
    // domain0 is the target; the rest are sources
    let (target_train, _, target_test) = &splits[0];
    let labelled = subsample_labelled(&mut rng, target_train, 0.05)?;
    let sources: Vec<&DomainDataset> = splits[1..].iter().map(|s| &s.0).collect();

    let model = Mlp::new(MlpArchitecture::new(spec.feature_dim, vec![32], spec.num_classes, 0)?)?;
    let init = model.init_params(&mut rng);
    let deployed = erm(&model, &init, &sources, 0.05, 32, 3000, &mut rng)?;
    println!(
        "{} labelled target samples; deployed accuracy {:.3}",
        labelled.len(),
        model.evaluate(&deployed, target_test)?.accuracy
    );

    let cfg = AlignConfig {
        tau: 20,
        rounds: 10,
        batch_size: 16,
        ..AlignConfig::default()
    };
    let (mut tuned, mut aligned) = (deployed.clone(), deployed.clone());
    println!("round  finetune  staralign");
    for round in 1..=cfg.rounds {
        tuned = finetune(&model, &tuned, &labelled, &cfg, &mut rng)?;
        for _ in 0..cfg.tau {
            aligned = staralign_central_round(&model, &aligned, &sources, &labelled, &cfg, &mut rng)?;
        }
        println!(
            "{round:>5}  {:>8.3}  {:>9.3}",
            model.evaluate(&tuned, target_test)?.accuracy,
            model.evaluate(&aligned, target_test)?.accuracy
        );
    }
    Ok(())
}
