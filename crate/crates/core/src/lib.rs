//! Single-domain dynamic generalization.
//!
//! A network `C(D(F(x)))` whose middle block `D` mixes a domain-invariant
//! (instance-normalized) branch with K per-sample weighted convolutions, an
//! information-maximization regularizer on the mixture weights, Fourier
//! amplitude-mixup perturbation of source images, and a bi-level meta-learning
//! loop whose inner step adapts only the dynamic block.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dynamic;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fourier;
pub mod graph;
pub mod init;
pub mod losses;
pub mod meta;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod seeding;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{ImageBatch, LabeledDataset};
pub use dynamic::DynamicWeights;
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use meta::{MetaConfig, MetaStepTrace};
pub use model::{build_model, Model, ModelSpec};
pub use params::{ParamPartition, Partition};
pub use real::{Dual, Real};
pub use tensor::Tensor;
pub use train::{Ablation, Trainer};
