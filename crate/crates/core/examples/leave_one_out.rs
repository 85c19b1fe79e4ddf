//! A reduced leave-one-domain-out sweep through the experiment harness,
//! printing the summary tables for both metrics.
//!
//! The full-size run is `fedpda experiment --config <file>`.

use fedpda::harness::{run_experiment_on, summarize, AdaptMethod, ExperimentConfig, Metric};

fn main() -> fedpda::Result<()> {
    let mut cfg = ExperimentConfig::default();
    let spec = cfg.data.synthetic.as_mut().expect("synthetic by default");
    spec.samples_per_domain = 600;
    cfg.pretrain.rounds = 10;
    cfg.pretrain.tau = 50;
    cfg.adapt.rounds = 10;
    cfg.adapt.tau = 20;
    cfg.seeds = vec![0, 1];
    cfg.methods = vec![
        AdaptMethod::Deployed,
        AdaptMethod::FedbnTargetBn,
        AdaptMethod::Finetune,
        AdaptMethod::FedpdaFedbn,
        AdaptMethod::Staralign,
    ];
    let domains = cfg.data.synthetic.as_ref().unwrap().build()?;
    let records = run_experiment_on(&cfg, &domains)?;
    println!("{} records\n", records.len());
    for metric in [Metric::Accuracy, Metric::WeightedAccuracy] {
        println!("{}", summarize(&records, metric, &[]).to_text());
    }
    Ok(())
}
