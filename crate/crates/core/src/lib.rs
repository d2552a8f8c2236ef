//! Instrumented lab for studying how a pretrained language transformer is
//! reused when fine-tuned on tokenized time series.

pub mod circuits;
pub mod crosscoder;
pub mod datagen;
pub mod forecaster;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod probe;
pub mod scalar;
pub mod tokenizer;
pub mod trainer;
pub mod transfer;

pub use scalar::Scalar;

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
/// Parameter storage precision of trained models.
pub type Transformer = model::Model<f32>;
/// Double-precision model used for gradient checks.
pub type Transformer64 = model::Model<f64>;
