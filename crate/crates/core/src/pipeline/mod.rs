//! Two-stage training: the partition model first, then experts and gate on
//! its frozen concept features.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{Checkpoint, ParamSection, RngState, Stage, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{TrainConfig, KEYS};
pub use train::{
    concept_features, evaluate, gate_optimizer, metrics_csv, param_fingerprint, train_moe, train_partition,
    EpochMetrics, MoeTrainer, PartitionTrainer, MOE_CSV_HEADER, PARTITION_CSV_HEADER,
};
