//! Experiment orchestration: configuration, leave-one-domain-out sweeps,
//! checkpoints, summary tables and the command-line front end.

mod checkpoint;
mod cli;
mod config;
mod experiment;
mod summary;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointMeta,
    CHECKPOINT_TAG,
};
pub use cli::cli_main;
pub use config::{
    AdaptMethod, CsvDomain, DataConfig, ExperimentConfig, LabelledBasis, ModelConfig,
    PretrainConfig, SelectionMetric,
};
pub use experiment::{
    adaptation_federation, cell_from_parts, partition_domains, prepare_cell, read_records,
    run_experiment, run_experiment_on, run_method, select_snapshots, source_node_id,
    write_records, Cell, ResultRecord, Snapshot, TargetSplits, TARGET_NODE,
};
pub use summary::{summarize, Metric, SummaryTable, CSV_GAP, TEXT_GAP};
