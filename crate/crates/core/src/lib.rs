//! Online data augmentation with learnable generators trained jointly with a
//! target network.

pub mod augmenters;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod meta;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
