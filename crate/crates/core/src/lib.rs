//! Originality estimation and genericization over black-box generative
//! backends.
//!
//! A creation's originality under a conditioning is the expected distance
//! from it to samples of the conditioned distribution. The [`estimator`]
//! approximates that expectation by Monte Carlo; the [`genericizer`] picks,
//! from a batch of samples, the one closest on average to the others.

pub mod backends;
pub mod cli;
pub mod embedding;
pub mod error;
pub mod estimator;
pub mod genericizer;
pub mod seed;
pub mod store;
pub mod synthlab;

pub use embedding::{cosine_distance, cosine_similarity, DistanceMatrix, Embedding, MetricKind, SampleBatch};
pub use error::{Error, Result};
pub use estimator::{
    originality_estimate, repeated_estimates, standard_error, typicality_summary, Conditioning,
    EstimateSummary, OriginalityEstimate, Reference, RunOptions,
};
pub use genericizer::{cross_mean_distances, genericize_stream, select_generic, GenericSelection};
