//! Scene/text transformer with spatial attention, masked-modeling
//! pre-training, and a synthetic scene-description corpus.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod point_encoder;
pub mod tensor;
pub mod trainer;
pub mod transformer;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
