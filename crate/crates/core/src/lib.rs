//! Two-stage knowledge distillation for coordinate-classification pose
//! estimators, with a synthetic whole-body dataset and evaluation tooling.

pub mod error;

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod objective;
pub mod plot;
pub mod simcc;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
