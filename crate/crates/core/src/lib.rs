//! Multi-city accident-risk forecasting.

pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod stg;
pub mod sts;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
