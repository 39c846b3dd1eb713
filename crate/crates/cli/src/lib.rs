//! Command-line and HTTP front ends for the texture reformer engine.

pub mod cli;
pub mod service;
pub mod transfer;

pub use transfer::{transfer_png, ConfigOverrides, PngInputs, RunError, TransferOutput};
