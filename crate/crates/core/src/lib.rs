//! Unsupervised discriminative part learning.
//!
//! Images are split into balanced groups by global similarity, a bank of
//! LDA part classifiers is learned per group by solving a constrained
//! region-to-part assignment, and images are then encoded by their part
//! responses for classification or retrieval.

pub mod assignment;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod grouping;
pub mod oracle;
pub mod parts;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
