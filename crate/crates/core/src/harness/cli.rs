use std::collections::BTreeMap;
use std::ffi::OsString;
use std::net::TcpListener;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::federation::{
    run_hub, serve_node, Aggregation, FederationConfig, Link, NodeId, NodeSpec, Role, TcpLink,
    TransportKind,
};
use crate::model::{Mlp, Model};
use crate::numerics::Rng;

use super::checkpoint::{load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointMeta};
use super::config::{AdaptMethod, ExperimentConfig};
use super::experiment::{
    cell_from_parts, partition_domains, prepare_cell, read_records, run_experiment, run_method,
    select_snapshots, write_records, TARGET_NODE,
};
use super::summary::{summarize, Metric};

#[derive(Debug, Parser)]
#[command(name = "fedpda", version, about = "Federated post-deployment adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (file or directory, depending on the command).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train on the sources of one held-out target and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Held-out target domain; defaults to the first configured target.
        #[arg(long)]
        target: Option<String>,
    },
    /// Adapt a pre-trained checkpoint to its target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        method: Option<String>,
    },
    /// Full leave-one-domain-out sweep; writes results and summary tables.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Run one federation node over TCP.
    ServeNode(ServeArgs),
    /// Rebuild summary tables from a results CSV.
    Summarize {
        #[arg(long)]
        input: PathBuf,
        /// Directory for summary.csv / summary.txt; prints only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliRole {
    Source,
    Target,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, value_enum)]
    role: CliRole,
    /// Node id; sources are numbered from 1 in domain order, the target is 0.
    #[arg(long)]
    id: u32,
    #[arg(long)]
    config: PathBuf,
    /// Port a source listens on.
    #[arg(long, default_value_t = 7001)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Target only: `ID@HOST:PORT` of each participating source.
    #[arg(long = "connect")]
    connect: Vec<String>,
    /// `staralign` or `pcgrad`.
    #[arg(long, default_value = "staralign")]
    aggregation: String,
    #[arg(long)]
    target: Option<String>,
    /// Target only: start from this checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Target only: where to save the adapted checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn target_index(cfg: &ExperimentConfig, domains: &[crate::data::DomainDataset], name: Option<&str>) -> Result<usize> {
    match name {
        Some(n) => domains
            .iter()
            .position(|d| d.domain_id() == n)
            .ok_or_else(|| Error::Config(format!("no domain named '{n}'"))),
        None => Ok(cfg.target_indices(domains)?[0]),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { common, target } => {
            let cfg = load(&common)?;
            let domains = cfg.load_domains(&base_dir(&common.config))?;
            let partitions = partition_domains(&cfg, &domains)?;
            let t = target_index(&cfg, &domains, target.as_deref())?;
            let seed = cfg.seeds[0];
            let cell = prepare_cell(&cfg, &domains, &partitions, t, seed)?;
            let metrics = cell.model.evaluate(&cell.deployed, &cell.target.test)?;
            let target_name = domains[t].domain_id().to_string();
            let out = common
                .out
                .unwrap_or_else(|| cfg.output.join(format!("pretrain_{target_name}_seed{seed}.fpda")));
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            save_checkpoint(
                &out,
                &Checkpoint {
                    meta: CheckpointMeta {
                        architecture: cell.model.architecture().clone(),
                        seed,
                        method: aggregation_label(cfg.pretrain.aggregation).into(),
                        round: cfg.pretrain.rounds as u32,
                        target: Some(target_name.clone()),
                    },
                    params: cell.deployed.clone(),
                    node_bn: cell.source_bn.clone(),
                },
            )?;
            println!(
                "pretrained for target {target_name}: test accuracy {:.4}, weighted accuracy {:.4}",
                metrics.accuracy, metrics.weighted_accuracy
            );
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Adapt {
            common,
            checkpoint,
            method,
        } => {
            let cfg = load(&common)?;
            let domains = cfg.load_domains(&base_dir(&common.config))?;
            let partitions = partition_domains(&cfg, &domains)?;
            let ckpt = super::checkpoint::load_checkpoint(&checkpoint)?;
            let t = target_index(&cfg, &domains, ckpt.meta.target.as_deref())?;
            let arch = cfg.architecture_for(domains[t].feature_dim(), domains[t].num_classes())?;
            ckpt.check_architecture(&arch)?;
            let method: AdaptMethod = match method {
                Some(m) => m.parse()?,
                None => AdaptMethod::Staralign,
            };
            let seed = common.seed.unwrap_or(ckpt.meta.seed);
            let cell = cell_from_parts(
                &cfg,
                &domains,
                &partitions,
                t,
                seed,
                ckpt.params.clone(),
                ckpt.node_bn.clone(),
            )?;
            let snaps = run_method(&cfg, &cell, t, method)?;
            println!("round  val_metric  test_acc  test_wacc");
            for s in &snaps {
                println!(
                    "{:>5}  {:>10.4}  {:>8.4}  {:>9.4}",
                    s.round, s.val_metric, s.test.accuracy, s.test.weighted_accuracy
                );
            }
            let best = select_snapshots(&snaps, 1)[0];
            println!("selected round {} on validation", best.round);
            if let Some(out) = common.out {
                save_checkpoint(
                    &out,
                    &Checkpoint {
                        meta: CheckpointMeta {
                            architecture: arch,
                            seed,
                            method: method.as_str().into(),
                            round: best.round,
                            target: ckpt.meta.target.clone(),
                        },
                        params: best.params.clone(),
                        node_bn: BTreeMap::new(),
                    },
                )?;
                println!("checkpoint written to {}", out.display());
            }
            Ok(())
        }
        Command::Experiment { common } => {
            let cfg = load(&common)?;
            let records = run_experiment(&cfg, &base_dir(&common.config))?;
            let out = common.out.unwrap_or_else(|| cfg.output.clone());
            create_dir(&out)?;
            write_records(out.join("results.csv"), &records)?;
            let domains: Vec<String> = cfg
                .load_domains(&base_dir(&common.config))
                .and_then(|d| {
                    let idx = cfg.target_indices(&d)?;
                    Ok(idx.into_iter().map(|i| d[i].domain_id().to_string()).collect())
                })?;
            let text = write_summaries(&records, &domains, &out)?;
            print!("{text}");
            println!("results written to {}", out.display());
            Ok(())
        }
        Command::Summarize { input, out } => {
            let records = read_records(&input)?;
            match out {
                Some(dir) => {
                    create_dir(&dir)?;
                    print!("{}", write_summaries(&records, &[], &dir)?);
                }
                None => {
                    for metric in [Metric::Accuracy, Metric::WeightedAccuracy] {
                        println!("{}", summarize(&records, metric, &[]).to_text());
                    }
                }
            }
            Ok(())
        }
        Command::ServeNode(args) => serve(args),
    }
}

/// Writes `summary.csv` and `summary.txt` for both metrics; returns the text.
fn write_summaries(records: &[super::ResultRecord], targets: &[String], dir: &Path) -> Result<String> {
    let mut csv = String::new();
    let mut text = String::new();
    for metric in [Metric::Accuracy, Metric::WeightedAccuracy] {
        let table = summarize(records, metric, targets);
        for line in table.to_csv().lines() {
            csv.push_str(metric.as_str());
            csv.push(',');
            csv.push_str(line);
            csv.push('\n');
        }
        text.push_str(&table.to_text());
        text.push('\n');
    }
    write_file(&dir.join("summary.csv"), &csv)?;
    write_file(&dir.join("summary.txt"), &text)?;
    Ok(text)
}

fn parse_peer(s: &str) -> Result<(NodeId, String)> {
    let (id, addr) = s
        .split_once('@')
        .ok_or_else(|| Error::Config(format!("--connect expects ID@HOST:PORT, got '{s}'")))?;
    let id: u32 = id
        .parse()
        .map_err(|_| Error::Config(format!("bad node id in '{s}'")))?;
    Ok((NodeId(id), addr.to_string()))
}

fn serve(args: ServeArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let aggregation: Aggregation = args.aggregation.parse()?;
    if !matches!(aggregation, Aggregation::StarAlign | Aggregation::PcGrad) {
        return Err(Error::Config("serve-node supports staralign and pcgrad".into()));
    }
    let domains = cfg.load_domains(&base_dir(&args.config))?;
    let partitions = partition_domains(&cfg, &domains)?;
    let t = target_index(&cfg, &domains, args.target.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let sources: Vec<usize> = (0..domains.len()).filter(|&k| k != t).collect();
    let arch = cfg.architecture_for(domains[t].feature_dim(), domains[t].num_classes())?;
    let model = Mlp::new(arch.clone())?;
    let node_seed = |id: NodeId| Rng::new(seed).derive(0x5e4e).derive(id.0 as u64).next_u64();

    match args.role {
        CliRole::Source => {
            let id = NodeId(args.id);
            let k = (args.id as usize)
                .checked_sub(1)
                .filter(|&k| k < sources.len())
                .ok_or_else(|| Error::Config(format!("source ids run from 1 to {}", sources.len())))?;
            let data = &partitions[sources[k]].0;
            let spec = NodeSpec {
                id,
                role: Role::Source,
                data: Some(data),
                seed: node_seed(id),
                initial_bn: None,
            };
            let listener = TcpListener::bind((args.host.as_str(), args.port))?;
            println!("{id} ({}) listening on {}", domains[sources[k]].domain_id(), listener.local_addr()?);
            let mut link = TcpLink::accept(&listener)?;
            let placeholder = model.init_params(&mut Rng::new(0));
            let summary = serve_node(&model, &spec, &cfg.adapt, aggregation, &placeholder, &mut link)?;
            println!("{id} served {} rounds", summary.rounds);
            Ok(())
        }
        CliRole::Target => {
            if args.id != TARGET_NODE.0 {
                return Err(Error::Config("the target node has id 0".into()));
            }
            if args.connect.is_empty() {
                return Err(Error::Config("the target needs at least one --connect".into()));
            }
            let cell = match &args.checkpoint {
                Some(path) => {
                    let ckpt = load_checkpoint_for(path, &arch)?;
                    cell_from_parts(&cfg, &domains, &partitions, t, seed, ckpt.params, ckpt.node_bn)?
                }
                None => {
                    let init = model.init_params(&mut Rng::new(seed));
                    cell_from_parts(&cfg, &domains, &partitions, t, seed, init, BTreeMap::new())?
                }
            };
            let mut nodes = vec![NodeSpec {
                id: TARGET_NODE,
                role: Role::Target,
                data: Some(&cell.target.labelled),
                seed: node_seed(TARGET_NODE),
                initial_bn: None,
            }];
            let mut links: Vec<Box<dyn Link>> = Vec::new();
            let mut peers: Vec<(NodeId, String)> =
                args.connect.iter().map(|s| parse_peer(s)).collect::<Result<_>>()?;
            peers.sort();
            for (id, addr) in &peers {
                nodes.push(NodeSpec {
                    id: *id,
                    role: Role::Source,
                    data: None,
                    seed: node_seed(*id),
                    initial_bn: None,
                });
                links.push(Box::new(TcpLink::connect(addr.as_str(), 300, Duration::from_millis(100))?));
            }
            let fed = FederationConfig {
                nodes,
                align: cfg.adapt.clone(),
                aggregation,
                transport: TransportKind::Socket,
            };
            let outcome = run_hub(&cell.model, &fed, links, &cell.deployed, &mut |r| {
                println!("round {:>3}  update norm {:.6}", r.round, r.update_norm);
                ControlFlow::Continue(())
            })?;
            let m = cell.model.evaluate(&outcome.params, &cell.target.test)?;
            println!(
                "completed {} rounds: test accuracy {:.4}, weighted accuracy {:.4}",
                outcome.rounds_completed, m.accuracy, m.weighted_accuracy
            );
            if let Some(out) = args.out {
                save_checkpoint(
                    &out,
                    &Checkpoint {
                        meta: CheckpointMeta {
                            architecture: arch,
                            seed,
                            method: aggregation_label(aggregation).into(),
                            round: outcome.rounds_completed,
                            target: Some(domains[t].domain_id().to_string()),
                        },
                        params: outcome.params,
                        node_bn: BTreeMap::new(),
                    },
                )?;
            }
            Ok(())
        }
    }
}

fn aggregation_label(a: Aggregation) -> &'static str {
    match a {
        Aggregation::FedAvg => "fedavg",
        Aggregation::FedBn => "fedbn",
        Aggregation::StarAlign => "staralign",
        Aggregation::PcGrad => "pcgrad",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(cli_main(["fedpda", "frobnicate"]), 2);
        assert_eq!(cli_main(["fedpda", "experiment", "--config", "x.toml", "--bogus"]), 2);
        assert_eq!(cli_main(["fedpda"]), 2);
    }

    #[test]
    fn missing_config_is_runtime_error() {
        assert_eq!(cli_main(["fedpda", "experiment", "--config", "/nonexistent/cfg.toml"]), 1);
    }

    #[test]
    fn peer_syntax() {
        assert_eq!(parse_peer("3@127.0.0.1:7003").unwrap(), (NodeId(3), "127.0.0.1:7003".into()));
        assert!(parse_peer("127.0.0.1:7003").is_err());
    }
}
