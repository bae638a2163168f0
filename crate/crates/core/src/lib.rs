//! Graph of brain structures grading.
//!
//! Patch-based grading of registered volumes against a CN/AD template
//! library, a per-subject graph of structure-wise grade statistics, sparse
//! feature selection, and cohort classification.

pub mod brain_graph;
pub mod classify;
pub mod featsel;
pub mod grading;
pub mod pipeline;
pub mod volio;
