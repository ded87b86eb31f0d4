//! Local learning: models, mini-batch gradients, momentum SGD and datasets.

pub mod data;
pub mod model;
pub mod objective;
pub mod sgd;

pub use data::{
    load_csv, make_synthetic, write_csv, CsvSchema, DatasetPartition, SplitKind, SyntheticData,
    SyntheticSpec, SyntheticTask,
};
pub use model::{Model, ModelKind};
pub use objective::{GaussianGradient, LocalObjective, ModelObjective, NoisyQuadratic};
pub use sgd::{accuracy, local_gradient, momentum_step, partition_loss, SgdConfig};
