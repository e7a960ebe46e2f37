//! Fast prompt tuning on a frozen tiny encoder–decoder.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod model;
pub mod optim;
pub mod partial;
pub mod rng;
pub mod schedule;
pub mod tasks;
pub mod tensor;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::{seeded_rng, Rng};
pub use tensor::Tensor;
