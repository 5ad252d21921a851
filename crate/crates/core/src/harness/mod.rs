//! Configuration, datasets, optimization and the grow-while-training loop.

pub mod config;
pub mod data;
pub mod optim;
pub mod train;

pub use config::{DatasetConfig, DatasetKind, LrScheduleConfig, OptimizerConfig, RunConfig, ScheduleSpec, TargetSpec};
pub use data::{load_dataset, DataSplits, Dataset};
pub use optim::AdamW;
pub use train::{batch_loss, evaluate, train, train_with_data, BranchGradNorm, EvalResult, EventReport, MetricsRecord, TrainOutcome};
