pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod lifecycle;
pub mod packed;
pub mod pruner;
pub mod report;
pub mod tensor;

pub use error::{PackError, Result};
pub use exec::Exec;
pub use harness::{ExperimentConfig, MetricsRow, RunOptions};
pub use lifecycle::{NetworkOptions, PackedNetwork, TaskRecord, TaskState, TrainSchedule};
pub use packed::{EncodedMask, OwnershipMap, Phase, TaskId};
