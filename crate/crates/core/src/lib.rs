//! Binarized neural architecture search: a partial-channel supernet over
//! a DARTS-style cell space whose operation sets are shrunk by sampling
//! subnets and abandoning the worst-performing operation per edge.

pub mod autodiff;
pub mod backend;
pub mod bitops;
pub mod config;
pub mod data;
pub mod error;
pub mod genotype;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod search;
pub mod space;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use bitops::{AmplitudeGranularity, BinarizeConfig, BinarizeMode};
pub use config::RunConfig;
pub use data::{DataFormat, Dataset};
pub use error::{Error, Result};
pub use genotype::Genotype;
pub use search::{SearchDriver, SearchOutcome};
pub use space::{CellType, OperationKind, SearchSpace};
pub use tensor::Tensor;
