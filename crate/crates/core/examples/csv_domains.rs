//! Runs the harness on domains read from CSV files: the synthetic domains
//! are written out first, then a config pointing at the files is loaded
//! exactly as `fedpda experiment` would load it.

use fedpda::data::{write_csv, BenchmarkSpec};
use fedpda::harness::{run_experiment, summarize, ExperimentConfig, Metric};

fn main() -> fedpda::Result<()> {
    let dir = std::env::temp_dir().join(format!("fedpda-csv-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let spec = BenchmarkSpec {
        num_domains: 3,
        samples_per_domain: 400,
        ..BenchmarkSpec::default()
    };
    let mut entries = String::new();
    for d in spec.build()? {
        let file = format!("{}.csv", d.domain_id());
        write_csv(dir.join(&file), &d)?;
        entries.push_str(&format!(
            "[[data.csv]]\npath = \"{file}\"\ndomain_id = \"{}\"\n\n",
            d.domain_id()
        ));
    }
    let text = format!(
        "methods = [\"deployed\", \"finetune\", \"staralign\"]\n\
         seeds = [0]\n\
         \n\
         [pretrain]\nrounds = 5\ntau = 40\n\
         \n\
         [adapt]\nrounds = 6\ntau = 20\n\
         \n\
         [data]\n\
         \n\
         {entries}"
    );
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, &text)?;
    println!("config:\n{text}");

    let cfg = ExperimentConfig::load(&config_path)?;
    let records = run_experiment(&cfg, &dir)?;
    println!("{}", summarize(&records, Metric::Accuracy, &[]).to_text());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
