//! Interpretable recognition by concept partition and a mixture of experts.
//!
//! A small convolutional backbone produces a feature map whose positions are
//! softly assigned to learnable concept vectors ([`partition`]). The pooled
//! per-concept features feed one expert each, and a gate network weighs the
//! experts ([`moe`]); the gate weights double as per-concept importance
//! explanations ([`explain`]). [`synthdata`] generates images with known
//! part layout so those explanations can be checked against ground truth.

pub mod error;
pub mod explain;
pub mod gradsuite;
pub mod moe;
pub mod nn;
pub mod numerics;
pub mod partition;
pub mod pipeline;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
