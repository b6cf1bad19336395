//! The detector: convolutional stem and transformer encoder, individual
//! decoder, part enhancer, fusion, group decoder, and association head.

mod config;
mod layers;
mod model;
mod outputs;
pub mod posenc;

pub use config::ModelConfig;
pub use model::{Encoded, Enhanced, ForwardOutput, GroupOut, IndividualOut, Model};
pub use outputs::{EmbeddingSet, PredictionSet};
