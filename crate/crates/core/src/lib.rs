//! Federated class-incremental fine-tuning of low-rank adapters.

pub mod aggregate;
pub mod config;
pub mod datagen;
pub mod error;
pub mod fedsim;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod partition;
pub mod report;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
