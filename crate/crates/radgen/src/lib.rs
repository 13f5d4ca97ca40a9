//! Desk-scale radiology-report-generation pipeline.
//!
//! Two stages over a synthetic chest-image corpus: (1) a multi-label GAP
//! classifier produces per-disease class-activation maps that are stacked
//! into disease-oriented masks and compressed with a truncated SVD; (2)
//! cosine retrieval over the compressed masks supplies reference reports
//! whose abnormal sentences feed a transformer decoder that averages a
//! generation distribution with a copy distribution over the prior tokens.

pub mod cam;
pub mod corpus;
pub mod generator;
pub mod metrics;
pub mod prior;
pub mod retrieval;
