//! Domain-steered mixture-of-experts workbench.
//!
//! The crate trains a small decoder-only MoE language model on synthetic
//! multi-domain corpora, finds domain-specific tokens by gradient×input
//! attribution, scores experts by how strongly they prefer those tokens,
//! and steers the router toward the selected experts at inference time
//! without touching any weights.
//!
//! Pipeline, by module:
//!
//! - [`tensor`]: `f64` tensors and a reverse-mode tape.
//! - [`model`]: the MoE language model, its trainer and checkpoint format.
//! - [`corpus`]: synthetic domains, character vocabulary, JSONL ingestion.
//! - [`attribution`]: token importance, quantile thresholds, leave-one-out oracle.
//! - [`profiler`]: routing traces, expert statistics and scores, top-K selection.
//! - [`steering`]: gate multipliers and their application to routing.
//! - [`harness`]: end-to-end experiments, sweeps and reports.

pub mod attribution;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod model;
pub mod profiler;
pub mod steering;
pub mod tensor;

pub use error::{Error, Result, Stage};
pub use tensor::{Tape, Tensor, Var};
