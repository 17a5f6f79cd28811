//! Replacing the hidden layers of a small classifier with a linear operator
//! on a lifted state space, fitted by extended dynamic mode decomposition.
//!
//! The numerical code is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the experiments use.

pub mod data;
pub mod dictionary;
pub mod edmd;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mlp;
pub mod pruning;
pub mod real;
pub mod tt;

pub use error::{Error, Result};
pub use real::Real;

pub type ImageSet64 = data::ImageSet<f64>;
pub type Mlp64 = mlp::Mlp<f64>;
pub type SnapshotSet64 = mlp::SnapshotSet<f64>;
pub type Dictionary64 = dictionary::Dictionary<f64>;
pub type KoopmanModel64 = edmd::KoopmanModel<f64>;
pub type TtTensor64 = tt::TtTensor<f64>;
pub type TtKoopmanPredictor64 = tt::TtKoopmanPredictor<f64>;
