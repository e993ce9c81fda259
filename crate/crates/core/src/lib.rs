//! Supervoxel-graph Transformer-GNN tumor localization with centralized,
//! federated (FedAvg) and isolated training, plus attention-based modality
//! explainability statistics.

mod binio;
pub mod rng;
pub mod config;
pub mod error;
pub mod explain;
pub mod fed;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod supervoxel;
pub mod volume;

pub use error::{Error, Result};
