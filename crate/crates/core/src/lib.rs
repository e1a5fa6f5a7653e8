pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod heads;
pub mod model;
pub mod params;
pub mod plot;
pub mod pseudo_label;
pub mod sim;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::Tensor;
