//! Hybrid review-aware rating prediction: sigmoid matrix factorization and
//! an embedding MLP, each pre-trained on ratings and reviewer reliability,
//! fused through a shared regression head.

pub mod checkpoint;
pub mod fusion;
pub mod harness;
pub mod ingest;
pub mod linalg;
pub mod metrics;
pub mod mf;
pub mod mlp;
pub mod reliability;
pub mod train;
