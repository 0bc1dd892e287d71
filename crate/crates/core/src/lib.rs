//! Referring image segmentation with a frozen dual-encoder backbone,
//! low-rank adapters, a text-filtered attention prompter and a promptable
//! mask decoder.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod prompter;
pub mod resize;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
