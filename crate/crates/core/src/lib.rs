//! Pairwise explanations for image re-identification models: relevance
//! propagation, intermediate feature matching, geometric plausibility metrics
//! and dataset-level layer selection.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod builder;
pub mod config;
pub mod container;
pub mod correspondence;
pub mod error;
pub mod eval;
pub mod explain;
pub mod geometry;
pub mod image;
pub mod lrp;
pub mod matching;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod stats;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
