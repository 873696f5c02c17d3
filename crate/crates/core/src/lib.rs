pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod infer;
pub mod nets;
pub mod objectives;
pub mod report;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use nets::{ModelGraph, NetConfig, Preset};
pub use tensor::{ConvSpec, PoolSpec, Scalar, Tensor};
