//! Desk-scale simulator for specificity-preserving federated MR image
//! reconstruction: partial model sharing (shared encoders, client-local
//! decoders), weighted contrastive regularization on parameter vectors,
//! and the baseline matrix (FedAvg, FedProx, SingleSet, Transfer-Site).
//!
//! The numeric core is generic over the scalar type through [`Scalar`];
//! the shipped artifact (file format, wire payloads, checkpoints) is
//! pinned to `f32` via the type aliases below. `f64` instantiations are
//! used where precision matters, e.g. gradient checking.

pub mod autodiff;
pub mod error;
pub mod fed;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod sim;
pub mod tensor;

mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type of the shipped artifact. Tensor files store 32-bit floats
/// and round payloads are accounted at 4 bytes per element.
pub type Real = f32;

pub type Tensor = tensor::Tensor<Real>;
pub type Parameter = autodiff::Parameter<Real>;
pub type Tape = autodiff::Tape<Real>;
pub type Optimizer = autodiff::Optimizer<Real>;
pub type ParameterSet = models::ParameterSet<Real>;
pub type Mask = sim::Mask<Real>;
pub type ClientDataset = sim::ClientDataset<Real>;
pub type ClientState = fed::ClientState<Real>;
pub type ServerState = fed::ServerState<Real>;
pub type Experiment = fed::Experiment<Real>;
