//! Genericization: pick the sample of a batch with the smallest mean
//! distance to the rest of the batch, and the reports built from streams of
//! such selections.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::GeneratorBackend;
use crate::embedding::{pairwise_distance_matrix, DistanceMatrix, Embedding, MetricKind, SampleBatch};
use crate::error::{Error, Result};
use crate::estimator::{draw_batches, estimate_subject, record_batch, Conditioning, Reference, RunOptions};
use crate::seed::{self, stream};
use crate::store::{AnchorRecord, Entry, ManifestRecord, Phase, RecordSink, SelectionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericSelection {
    pub batch_index: usize,
    pub selected_index: usize,
    pub cross_mean_distance: f64,
    pub scores: Vec<f64>,
}

/// Mean of each row of the matrix, excluding the diagonal.
pub fn cross_mean_distances(matrix: &DistanceMatrix) -> Result<Vec<f64>> {
    let n = matrix.n();
    if n < 2 {
        return Err(Error::domain(format!("cross-mean distance needs n >= 2, got {n}")));
    }
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            let row = matrix.row(i);
            let sum: f64 = row[..i].iter().chain(&row[i + 1..]).sum();
            sum / denom
        })
        .collect())
}

/// Index of the smallest score; the lowest index wins ties.
pub fn argmin_lowest(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] <= *s => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn select_from_matrix(matrix: &DistanceMatrix, batch_index: usize) -> Result<GenericSelection> {
    let scores = cross_mean_distances(matrix)?;
    let selected_index = argmin_lowest(&scores).expect("n >= 2");
    Ok(GenericSelection {
        batch_index,
        selected_index,
        cross_mean_distance: scores[selected_index],
        scores,
    })
}

pub fn select_generic(batch: &SampleBatch, metric: MetricKind) -> Result<GenericSelection> {
    if batch.len() < 2 {
        return Err(Error::domain(format!(
            "genericization needs at least 2 samples, got {}",
            batch.len()
        )));
    }
    select_from_matrix(&pairwise_distance_matrix(batch, metric)?, 0)
}

/// A selection together with the sample it picked.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSample {
    pub selection: GenericSelection,
    pub sample: Embedding,
}

/// Draws `k` independent batches of `n`, selecting the most generic sample of
/// each. Samples and selections are recorded in batch order. If a batch
/// fails, everything before it stays recorded and the error reports how many
/// batches completed.
#[allow(clippy::too_many_arguments)]
pub fn genericize_stream(
    backend: &dyn GeneratorBackend,
    conditioning: &Conditioning,
    k: usize,
    n: usize,
    metric: MetricKind,
    opts: RunOptions,
    sink: &mut dyn RecordSink,
) -> Result<Vec<SelectedSample>> {
    if k == 0 {
        return Err(Error::input("K must be at least 1"));
    }
    if n < 2 {
        return Err(Error::domain(format!("genericization needs n >= 2, got {n}")));
    }
    let prompt = conditioning.prompt.as_str();
    let chunk = opts.parallelism.max(1) * 4;
    let mut out = Vec::with_capacity(k);
    let interrupted = |completed: usize, e: Error| Error::StreamInterrupted {
        completed,
        source: Box::new(e),
    };
    for start in (0..k).step_by(chunk) {
        let seeds: Vec<(usize, u64)> = (start..(start + chunk).min(k))
            .map(|b| (b, seed::batch_seed(conditioning.seed_base, stream::GENERICIZE, b)))
            .collect();
        let batches = draw_batches(backend, prompt, &seeds, n, opts.parallelism);
        for ((b, _), batch) in seeds.iter().zip(batches) {
            let b = *b;
            let step = || -> Result<SelectedSample> {
                let batch = batch?;
                record_batch(sink, prompt, Phase::Genericize, b, &batch)?;
                let matrix = pairwise_distance_matrix(&batch, metric).map_err(|e| e.in_batch(b))?;
                let selection = select_from_matrix(&matrix, b)?;
                let sample = batch.items()[selection.selected_index].clone();
                sink.append(Entry::Selection(SelectionRecord {
                    prompt: prompt.to_string(),
                    batch: b,
                    selected_index: selection.selected_index,
                    selected_id: sample.id().to_string(),
                    cross_mean_distance: selection.cross_mean_distance,
                    scores: selection.scores.clone(),
                }))?;
                Ok(SelectedSample { selection, sample })
            };
            match step() {
                Ok(s) => out.push(s),
                Err(e) => return Err(interrupted(b, e)),
            }
        }
    }
    Ok(out)
}

/// Position of a sample within a genericize stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub batch: usize,
    pub index: usize,
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{:06}-i{:04}", self.batch, self.index)
    }
}

/// The genericize-phase samples and selections of one prompt.
#[derive(Debug, Clone, Default)]
pub struct GenericizeSlice {
    pub prompt: String,
    pub raw: Vec<(SampleKey, Embedding)>,
    pub selected: Vec<SampleKey>,
}

impl GenericizeSlice {
    pub fn from_records(records: &[ManifestRecord], prompt: &str) -> Result<Self> {
        let mut raw = Vec::new();
        let mut selected = Vec::new();
        for r in records {
            match &r.entry {
                Entry::Sample(s) if s.phase == Phase::Genericize && s.prompt == prompt => {
                    let e = Embedding::new(s.id.clone(), s.values.clone())?;
                    raw.push((SampleKey { batch: s.batch, index: s.index }, e));
                }
                Entry::Selection(s) if s.prompt == prompt => selected.push(SampleKey {
                    batch: s.batch,
                    index: s.selected_index,
                }),
                _ => {}
            }
        }
        Ok(GenericizeSlice {
            prompt: prompt.to_string(),
            raw,
            selected,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    fn selected_samples(&self) -> Result<Vec<(SampleKey, &Embedding)>> {
        let index: HashMap<SampleKey, &Embedding> = self.raw.iter().map(|(k, e)| (*k, e)).collect();
        self.selected
            .iter()
            .map(|k| {
                index.get(k).map(|e| (*k, *e)).ok_or_else(|| {
                    Error::State(format!("selection {k} has no recorded sample"))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Binning {
    /// Shared edges over a fixed interval, e.g. `[-1, 1]`.
    Fixed(f64, f64),
    /// Shared edges over the observed range of both series.
    Observed,
}

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub raw_counts: Vec<u64>,
    pub selected_counts: Vec<u64>,
}

impl Histogram {
    /// Values outside the edges land in the nearest end bin.
    fn count(edges: &[f64], values: &[f64]) -> Vec<u64> {
        let bins = edges.len() - 1;
        let (lo, hi) = (edges[0], edges[bins]);
        let mut counts = vec![0; bins];
        for v in values {
            let pos = ((v - lo) / (hi - lo) * bins as f64).floor();
            let i = if pos.is_nan() || pos < 0.0 { 0 } else { (pos as usize).min(bins - 1) };
            counts[i] += 1;
        }
        counts
    }

    pub fn build(raw: &[f64], selected: &[f64], bins: usize, binning: Binning) -> Result<Self> {
        if bins == 0 {
            return Err(Error::input("histogram needs at least one bin"));
        }
        let (mut lo, mut hi) = match binning {
            Binning::Fixed(lo, hi) => (lo, hi),
            Binning::Observed => raw
                .iter()
                .chain(selected)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v))),
        };
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::input(format!("invalid histogram range [{lo}, {hi}]")));
        }
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        let mut edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        edges[bins] = hi;
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain(format!("range [{lo}, {hi}] too narrow for {bins} bins")));
        }
        Ok(Histogram {
            raw_counts: Self::count(&edges, raw),
            selected_counts: Self::count(&edges, selected),
            edges,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub reference_label: String,
    pub metric: MetricKind,
    pub raw_similarities: Vec<f64>,
    pub selected_similarities: Vec<f64>,
    pub histogram: Histogram,
}

pub fn similarity_report(
    reference: &Reference,
    slice: &GenericizeSlice,
    metric: MetricKind,
    bins: usize,
    binning: Binning,
) -> Result<SimilarityReport> {
    if slice.raw.is_empty() || slice.selected.is_empty() {
        return Err(Error::input(format!(
            "no genericize samples or selections recorded for prompt {:?}",
            slice.prompt
        )));
    }
    let r = reference.embedding();
    let raw_similarities = slice
        .raw
        .iter()
        .map(|(_, e)| metric.similarity(r, e))
        .collect::<Result<Vec<_>>>()?;
    let selected_similarities = slice
        .selected_samples()?
        .into_iter()
        .map(|(_, e)| metric.similarity(r, e))
        .collect::<Result<Vec<_>>>()?;
    let histogram = Histogram::build(&raw_similarities, &selected_similarities, bins, binning)?;
    Ok(SimilarityReport {
        reference_label: reference.label().to_string(),
        metric,
        raw_similarities,
        selected_similarities,
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub key: SampleKey,
    pub sample_id: String,
    pub similarity: f64,
    /// Whether the sample was emitted as a generic selection.
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopSimilar {
    pub entries: Vec<TopEntry>,
    /// `k` exceeded the number of samples.
    pub truncated: bool,
}

/// The `k` raw samples most similar to the reference, most similar first.
/// Ties are ordered by sample id, then position.
pub fn top_similar(reference: &Reference, slice: &GenericizeSlice, k: usize, metric: MetricKind) -> Result<TopSimilar> {
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    if slice.raw.is_empty() {
        return Err(Error::input(format!("no genericize samples recorded for prompt {:?}", slice.prompt)));
    }
    let selected: std::collections::HashSet<SampleKey> = slice.selected.iter().copied().collect();
    let mut entries = slice
        .raw
        .iter()
        .map(|(key, e)| {
            Ok(TopEntry {
                key: *key,
                sample_id: e.id().to_string(),
                similarity: metric.similarity(reference.embedding(), e)?,
                selected: selected.contains(key),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
            .then_with(|| a.key.cmp(&b.key))
    });
    let truncated = k > entries.len();
    entries.truncate(k);
    Ok(TopSimilar { entries, truncated })
}

/// The selection ranked least original by the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenericAnchor {
    /// Position within the input selections.
    pub position: usize,
    pub sample: Embedding,
    pub originality: f64,
    /// Originality estimate of every candidate, in input order.
    pub estimates: Vec<f64>,
}

/// Estimates each selected sample's originality against its own fresh
/// batch of `n` and returns the lowest. Ties go to the earliest selection.
pub fn most_generic_reference(
    selections: &[SelectedSample],
    backend: &dyn GeneratorBackend,
    conditioning: &Conditioning,
    n: usize,
    metric: MetricKind,
    sink: &mut dyn RecordSink,
) -> Result<GenericAnchor> {
    if selections.is_empty() {
        return Err(Error::input("no selections to rank"));
    }
    let mut estimates = Vec::with_capacity(selections.len());
    for s in selections {
        let b = s.selection.batch_index;
        let (_, est) = estimate_subject(backend, &s.sample, conditioning, stream::ANCHOR, b, n, metric)?;
        sink.append(Entry::Anchor(AnchorRecord {
            prompt: conditioning.prompt.clone(),
            batch: b,
            index: s.selection.selected_index,
            sample_id: s.sample.id().to_string(),
            originality: est.value,
        }))?;
        estimates.push(est.value);
    }
    let position = argmin_lowest(&estimates).expect("nonempty");
    Ok(GenericAnchor {
        position,
        sample: selections[position].sample.clone(),
        originality: estimates[position],
        estimates,
    })
}

/// Empirical `q`-quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}
