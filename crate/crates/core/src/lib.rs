//! Self-supervised ViT pretraining and fine-tuning for person re-identification.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod head;
mod layers;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod vit;
pub mod viz;

pub use error::{Error, Result};
