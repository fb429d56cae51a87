//! Embedding geometry: cosine similarity and distance, batches, and the
//! pairwise distance matrix every estimate and selection is computed from.
//!
//! All accumulation happens in `f64` with a fixed left-to-right summation
//! order, so the same pair of vectors always yields bit-identical results
//! whether it is evaluated alone or as part of a matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One creation in feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEmbedding", into = "RawEmbedding")]
pub struct Embedding {
    id: String,
    values: Vec<f64>,
    norm: f64,
}

#[derive(Serialize, Deserialize)]
struct RawEmbedding {
    id: String,
    values: Vec<f64>,
}

impl TryFrom<RawEmbedding> for Embedding {
    type Error = Error;

    fn try_from(raw: RawEmbedding) -> Result<Self> {
        Embedding::new(raw.id, raw.values)
    }
}

impl From<Embedding> for RawEmbedding {
    fn from(e: Embedding) -> Self {
        RawEmbedding {
            id: e.id,
            values: e.values,
        }
    }
}

impl Embedding {
    /// Rejects empty, non-finite and zero-norm vectors.
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if values.is_empty() {
            return Err(Error::input(format!("embedding {id:?} has dimension 0")));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "embedding {id:?} has a non-finite component at position {pos}"
            )));
        }
        let norm = dot(&values, &values).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::domain(format!("embedding {id:?} has zero norm")));
        }
        Ok(Embedding { id, values, norm })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::input(format!(
            "dimension mismatch: {:?} has {} but {:?} has {}",
            a.id,
            a.dim(),
            b.id,
            b.dim()
        )));
    }
    Ok(())
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a, b)?;
    Ok(similarity_unchecked(a, b))
}

#[inline]
fn similarity_unchecked(a: &Embedding, b: &Embedding) -> f64 {
    if a.values == b.values {
        return 1.0;
    }
    (dot(&a.values, &b.values) / (a.norm * b.norm)).clamp(-1.0, 1.0)
}

/// `1 - cosine_similarity`, in `[0, 2]`.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Rescale to unit euclidean norm. Cosine distances are unchanged.
pub fn normalize(e: &Embedding) -> Result<Embedding> {
    if e.norm == 0.0 {
        return Err(Error::domain(format!("cannot normalize zero vector {:?}", e.id)));
    }
    if e.norm == 1.0 {
        return Ok(e.clone());
    }
    let values = e.values.iter().map(|v| v / e.norm).collect();
    Embedding::new(e.id.clone(), values)
}

/// Distance metrics available to estimates and selections. Manifests refer
/// to a metric by [`MetricKind::name`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum MetricKind {
    #[default]
    #[serde(rename = "cosine")]
    Cosine,
}

impl MetricKind {
    pub const ALL: &'static [MetricKind] = &[MetricKind::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Cosine => "cosine",
        }
    }

    pub fn distance(self, a: &Embedding, b: &Embedding) -> Result<f64> {
        match self {
            MetricKind::Cosine => cosine_distance(a, b),
        }
    }

    /// The similarity the metric is derived from; reports are expressed in it.
    pub fn similarity(self, a: &Embedding, b: &Embedding) -> Result<f64> {
        match self {
            MetricKind::Cosine => cosine_similarity(a, b),
        }
    }

    #[inline]
    fn distance_unchecked(self, a: &Embedding, b: &Embedding) -> f64 {
        match self {
            MetricKind::Cosine => 1.0 - similarity_unchecked(a, b),
        }
    }

    /// Upper bound of the metric's range, used to validate matrices.
    pub fn max_distance(self) -> f64 {
        match self {
            MetricKind::Cosine => 2.0,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" | "cosine-distance" | "cosine_distance" => Ok(MetricKind::Cosine),
            other => Err(Error::input(format!("unknown metric {other:?}"))),
        }
    }
}

/// An ordered collection of embeddings sharing one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    items: Vec<Embedding>,
}

impl SampleBatch {
    pub fn new(items: Vec<Embedding>) -> Result<Self> {
        if let Some(first) = items.first() {
            let dim = first.dim();
            if let Some((i, e)) = items.iter().enumerate().find(|(_, e)| e.dim() != dim) {
                return Err(Error::input(format!(
                    "batch item {i} ({:?}) has dimension {}, expected {dim}",
                    e.id(),
                    e.dim()
                )));
            }
        }
        Ok(SampleBatch { items })
    }

    /// Builds a batch from raw vectors, naming items by position.
    pub fn from_vectors(prefix: &str, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let items = vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                Embedding::new(format!("{prefix}{i}"), v).map_err(|e| {
                    Error::input(format!("batch item {i}: {e}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SampleBatch::new(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(Embedding::dim)
    }

    pub fn items(&self) -> &[Embedding] {
        &self.items
    }

    pub fn get(&self, i: usize) -> Option<&Embedding> {
        self.items.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Embedding> {
        self.items.iter()
    }

    pub fn into_items(self) -> Vec<Embedding> {
        self.items
    }
}

impl<'a> IntoIterator for &'a SampleBatch {
    type Item = &'a Embedding;
    type IntoIter = std::slice::Iter<'a, Embedding>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

/// Symmetric `n x n` matrix of pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Wraps precomputed entries (row-major). Validates shape, symmetry
    /// (within 1e-10) and the zero diagonal.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::input(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                entries.len()
            )));
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::input(format!("diagonal entry {i} is not zero")));
            }
            for j in (i + 1)..n {
                let (a, b) = (entries[i * n + j], entries[j * n + i]);
                if !a.is_finite() || a < 0.0 || (a - b).abs() > 1e-10 {
                    return Err(Error::input(format!(
                        "entries ({i},{j})={a} and ({j},{i})={b} are not a valid symmetric distance"
                    )));
                }
            }
        }
        Ok(DistanceMatrix { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Every entry multiplied by `alpha` (> 0).
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::domain(format!("scale factor must be positive, got {alpha}")));
        }
        Ok(DistanceMatrix {
            n: self.n,
            entries: self.entries.iter().map(|d| d * alpha).collect(),
        })
    }
}

/// Materializes `d(y_i, y_j)` for every pair in the batch. Only the upper
/// triangle is computed; the lower triangle mirrors it exactly.
pub fn pairwise_distance_matrix(batch: &SampleBatch, metric: MetricKind) -> Result<DistanceMatrix> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::input("distance matrix needs at least one sample"));
    }
    let mut entries = vec![0.0; n * n];
    let items = batch.items();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = metric.distance_unchecked(&items[i], &items[j]);
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, entries })
}
