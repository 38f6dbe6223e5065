//! Counterfactual open-book QA dataset generation.
//!
//! Questions are turned into sampled (document, answer) recitations, filtered
//! by surface form, a factuality judge and an attribution judge, and reduced
//! to one record per question. Datasets can then be scored with an NLI model,
//! and QA predictions with token F1 / exact match.

pub mod corpus;
pub mod filters;
pub mod gateway;
pub mod metrics;
pub mod quality;
pub mod recitation;
pub mod pipeline;
