//! Synthetic multi-domain classification tasks and their federated splits.

mod partition;
mod task;

pub use partition::{
    base_novel_split, dirichlet_partition, leave_one_domain_out, ClassSplit, ClientShard, LodoSplit,
};
pub use task::{generate_task, Dataset, DatasetSnapshot, DomainSpec, ShardAssignment, TaskSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid task: {0}")]
    InvalidSpec(String),
    #[error("could not place anchor {class} at separation {separation} after {tries} tries")]
    InfeasibleAnchors {
        class: usize,
        separation: f64,
        tries: usize,
    },
    #[error("cannot partition: {0}")]
    Partition(String),
    #[error("invalid class split: {0}")]
    Split(String),
    #[error("unknown domain {0}")]
    UnknownDomain(usize),
}
