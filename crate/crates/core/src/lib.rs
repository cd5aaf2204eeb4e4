//! Desk-scale selective state-space video captioner.
//!
//! Building blocks: LTI and selective SSM scans with hand-derived gradients
//! (`ssm`), the hierarchical bidirectional scan projector (`ahbs`), a small
//! Mamba-style language model with recurrent decoding (`model`), a
//! procedural video-caption dataset (`synthdata`), BLEU/ROUGE metrics
//! (`metrics`), a quadratic-attention reference (`attention`), and the
//! throughput/memory benchmark harness (`bench`).

pub mod error;
pub mod precision;
pub mod ahbs;
pub mod model;
pub mod nn;
pub mod attention;
pub mod bench;
pub mod metrics;
pub mod config;
pub mod ssm;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
