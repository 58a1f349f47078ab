pub mod check;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
