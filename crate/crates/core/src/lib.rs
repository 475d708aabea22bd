pub mod data;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod expert;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod run;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
