//! Centralized, federated and isolated training on supervoxel graphs.

mod metrics;
mod partition;
mod run;
mod train;

#[cfg(test)]
mod tests;

pub use metrics::{combine, eval_metrics, score_graphs, voxel_dice, EvalGraph, GraphScore, Metrics};
pub use partition::{partition_dataset, ClientSplit, PartitionPlan};
pub use run::{
    run_centralized, run_federated, run_isolated, Paradigm, RoundReport, RunHistory,
    CSV_HEADER,
};
pub use train::{fedavg_aggregate, local_train_epoch, EarlyStopper, Schedule};

/// Bytes one client uploads per round: the flattened parameters as f32.
pub fn bytes_per_round(param_count: usize) -> u64 {
    4 * param_count as u64
}
