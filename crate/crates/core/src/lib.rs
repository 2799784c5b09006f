//! Desk-scale bimanual imitation learning with hierarchical attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff and Adam
//! - [`nn`]: transformer building blocks (attention, encoder/decoder layers)
//! - [`encoder`]: segment-wise + cross-segment hierarchical encoder
//! - [`decoder`]: two parallel arm decoders with a synchronization block
//! - [`policy`]: chunked-action CVAE policy, training loop, temporal ensemble
//! - [`sim`]: deterministic 2-D two-arm toy world with scripted demonstrators
//! - [`io`]: bit-exact episode / checkpoint / stats persistence
//! - [`config`]: model configuration and the `paper` / `desk` profiles

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod io;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod tensor;


pub use config::{ModelConfig, Profile};
pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, ParamId, ParameterStore, Scalar, Tensor};
