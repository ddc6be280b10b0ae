//! Batch landmark retrieval and recognition.
//!
//! The crate is organized as a stack of small, individually testable
//! modules:
//!
//! - [`store`]: descriptor/label/detection data model and file codecs
//! - [`features`]: l2 normalization, multi-model concatenation, PCA+whitening
//! - [`search`]: exact kNN, k-means, and an inverted-file (IVF) index
//! - [`localmatch`]: local-descriptor matching for geometric-free verification
//! - [`rerank`]: verification-weighted database augmentation and query
//!   expansion, plus same-category promotion
//! - [`recognition`]: kNN voting, non-landmark filtering, grading, rescoring
//! - [`eval`]: GAP / mAP@k metrics and the stage-ablation harness
//! - [`synth`]: seeded synthetic dataset generator for benchmarks and tests
//! - [`config`] / [`pipeline`]: end-to-end batch orchestration
//!
//! Everything is deterministic: random choices are driven by explicit seeds,
//! parallel sections preserve input order, and rankings break score ties by
//! ascending image id, so a pipeline run reproduces bit-identical artifacts
//! regardless of thread count.

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod localmatch;
pub mod pipeline;
pub mod recognition;
pub mod rerank;
pub mod search;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
