//! Black-box sample sources standing in for the conditional distribution
//! `P(y | prompt)`.
//!
//! Every backend is deterministic given `(prompt, seed)`: the same call
//! always yields the same batch. Backends return embeddings only; raw
//! content never leaves the HTTP backend.

mod corpus;
mod http;
mod synthetic;

use std::sync::Arc;

pub use corpus::{read_embedding_file, write_embedding_file, CorpusBackend, EmbeddingRecord};
pub use http::{
    wire, HttpBackend, HttpClient, HttpConfig, RetryPolicy, ATTEMPT_ID_HEADER, REQUEST_ID_HEADER,
    TOKEN_ENV,
};
pub use synthetic::{
    exact_originality, Atom, Component, DiscreteConfig, MixtureConfig, SyntheticBackend,
    SyntheticConfig, SyntheticModel,
};

use crate::embedding::SampleBatch;
use crate::error::{Error, Result};

/// What a backend declares about itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendDescriptor {
    pub id: String,
    /// `None` when the dimension is only learned from the first response.
    pub dim: Option<usize>,
    pub supports_raw_content: bool,
    pub max_parallelism: usize,
}

pub trait GeneratorBackend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Draw `count` i.i.d. samples conditioned on `prompt`.
    fn generate(&self, prompt: &str, seed: u64, count: usize) -> Result<SampleBatch>;
}

impl<B: GeneratorBackend + ?Sized> GeneratorBackend for Arc<B> {
    fn descriptor(&self) -> BackendDescriptor {
        (**self).descriptor()
    }

    fn generate(&self, prompt: &str, seed: u64, count: usize) -> Result<SampleBatch> {
        (**self).generate(prompt, seed, count)
    }
}

impl<B: GeneratorBackend + ?Sized> GeneratorBackend for &B {
    fn descriptor(&self) -> BackendDescriptor {
        (**self).descriptor()
    }

    fn generate(&self, prompt: &str, seed: u64, count: usize) -> Result<SampleBatch> {
        (**self).generate(prompt, seed, count)
    }
}

/// Generate and enforce the batch-level contract (size and dimension).
pub fn generate_checked(
    backend: &dyn GeneratorBackend,
    prompt: &str,
    seed: u64,
    count: usize,
) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::input("sample count must be at least 1"));
    }
    let batch = backend.generate(prompt, seed, count)?;
    if batch.len() != count {
        return Err(Error::Contract(format!(
            "backend {} returned {} samples, {count} requested",
            backend.descriptor().id,
            batch.len()
        )));
    }
    let desc = backend.descriptor();
    if let (Some(want), Some(got)) = (desc.dim, batch.dim()) {
        if want != got {
            return Err(Error::Contract(format!(
                "backend {} declared dimension {want} but returned {got}",
                desc.id
            )));
        }
    }
    Ok(batch)
}
