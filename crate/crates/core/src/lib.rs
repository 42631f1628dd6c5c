//! Evaluation toolkit for RoI-grounded PET/CT report generation.
//!
//! - [`corpus`]: ground-truth annotations, the bracketed line format and
//!   anatomical slice splitting
//! - [`extraction`]: free text to structured RoIs (remote LLM or lexicon
//!   rules)
//! - [`embedding`]: text embedders and cosine similarity
//! - [`matching`]: similarity matrix, Hungarian assignment, thresholding
//! - [`metrics`]: RoI Coverage, RoIQ, BLEU/ROUGE and embedding text scores
//! - [`roigraph`]: RoI relational graph construction and export
//! - [`cli`]: the `roi-eval` command line

pub mod cli;
pub mod corpus;
pub mod embedding;
pub mod extraction;
pub mod matching;
pub mod metrics;
mod remote;
pub mod roigraph;
