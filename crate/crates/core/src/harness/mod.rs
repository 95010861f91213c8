//! Training, model selection and experiment runners.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod features;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{preset, OptimizerKind, RunConfig, Task, PRESETS};
pub use experiments::{ablation_run, grid_search, kfold_run, AblationTable, GridResult, KFoldResult};
pub use features::FeatureSet;
pub use train::{prepare_features, train, TrainOptions, TrainOutcome};
