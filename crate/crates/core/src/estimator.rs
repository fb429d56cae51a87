//! Monte Carlo originality estimation.
//!
//! The originality of a fixed creation `c` under a conditioning is the
//! expected distance from `c` to a draw of the conditioned distribution. It
//! is estimated by the sample mean of `d(c, y_i)` over `n` draws, and the
//! run-level statistics repeat that estimate `m` times with independent
//! batches.
//!
//! Batch `b` of a stream is generated with seed
//! `seed::batch_seed(seed_base, stream, b)`; the backend derives per-sample
//! seeds from that. Batches may be drawn concurrently, but aggregation and
//! manifest writes always happen in batch order, so results do not depend
//! on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{generate_checked, GeneratorBackend};
use crate::embedding::{Embedding, MetricKind, SampleBatch};
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::store::{
    Entry, EstimateRecord, Phase, RecordSink, SampleRecord, Subject, SummaryRecord, STD_CONVENTION,
};

/// The fixed creation whose originality is measured.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    label: String,
    embedding: Embedding,
}

impl Reference {
    pub fn new(label: impl Into<String>, embedding: Embedding) -> Self {
        Reference {
            label: label.into(),
            embedding,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub prompt: String,
    pub backend_id: String,
    pub seed_base: u64,
}

impl Conditioning {
    pub fn new(prompt: impl Into<String>, backend_id: impl Into<String>, seed_base: u64) -> Result<Self> {
        let prompt = prompt.into();
        if prompt.is_empty() {
            return Err(Error::input("prompt must not be empty"));
        }
        Ok(Conditioning {
            prompt,
            backend_id: backend_id.into(),
            seed_base,
        })
    }

    /// Conditioning bound to whatever backend will run it.
    pub fn for_backend(prompt: impl Into<String>, backend: &dyn GeneratorBackend, seed_base: u64) -> Result<Self> {
        Self::new(prompt, backend.descriptor().id, seed_base)
    }

    fn check_backend(&self, backend: &dyn GeneratorBackend) -> Result<()> {
        let id = backend.descriptor().id;
        if id != self.backend_id {
            return Err(Error::input(format!(
                "conditioning targets backend {:?} but {id:?} was supplied",
                self.backend_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OriginalityEstimate {
    pub value: f64,
    pub n: usize,
    pub distances: Vec<f64>,
    pub metric: MetricKind,
    pub conditioning: Option<Conditioning>,
}

impl OriginalityEstimate {
    pub fn standard_error(&self) -> Result<f64> {
        standard_error(self)
    }
}

/// Mean distance from the reference to every sample.
pub fn originality_estimate(
    reference: &Reference,
    samples: &SampleBatch,
    metric: MetricKind,
) -> Result<OriginalityEstimate> {
    estimate_against(&reference.embedding, samples, metric)
}

fn estimate_against(subject: &Embedding, samples: &SampleBatch, metric: MetricKind) -> Result<OriginalityEstimate> {
    if samples.is_empty() {
        return Err(Error::input("cannot estimate originality from an empty batch"));
    }
    let distances = samples
        .iter()
        .map(|y| metric.distance(subject, y))
        .collect::<Result<Vec<_>>>()?;
    let n = distances.len();
    Ok(OriginalityEstimate {
        value: distances.iter().sum::<f64>() / n as f64,
        n,
        distances,
        metric,
        conditioning: None,
    })
}

/// Sample standard deviation of the per-sample distances over `sqrt(n)`.
pub fn standard_error(estimate: &OriginalityEstimate) -> Result<f64> {
    let n = estimate.distances.len();
    if n < 2 {
        return Err(Error::domain(format!("standard error needs n >= 2, got {n}")));
    }
    let mean = estimate.distances.iter().sum::<f64>() / n as f64;
    let ss: f64 = estimate.distances.iter().map(|d| (d - mean).powi(2)).sum();
    Ok((ss / (n - 1) as f64).sqrt() / (n as f64).sqrt())
}

/// `m` estimates with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSummary {
    pub estimates: Vec<OriginalityEstimate>,
    pub mean: f64,
    pub std: f64,
    /// Set when `m == 1` or `n == 1`.
    pub degenerate: bool,
}

impl EstimateSummary {
    pub fn from_estimates(estimates: Vec<OriginalityEstimate>) -> Result<Self> {
        if estimates.is_empty() {
            return Err(Error::input("summary needs at least one estimate"));
        }
        let m = estimates.len() as f64;
        let mean = estimates.iter().map(|e| e.value).sum::<f64>() / m;
        let std = if estimates.len() == 1 {
            0.0
        } else {
            (estimates.iter().map(|e| (e.value - mean).powi(2)).sum::<f64>() / m).sqrt()
        };
        let degenerate = estimates.len() == 1 || estimates.iter().any(|e| e.n == 1);
        Ok(EstimateSummary {
            estimates,
            mean,
            std,
            degenerate,
        })
    }

    pub fn m(&self) -> usize {
        self.estimates.len()
    }

    /// Standard error of `mean`, treating the estimates as i.i.d.
    pub fn standard_error_of_mean(&self) -> f64 {
        self.std / (self.m() as f64).sqrt()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.estimates.iter().map(|e| e.value)
    }
}

/// `(b - a) / sqrt(se_a^2 + se_b^2)`: how many combined standard errors `b`
/// lies above `a`. Infinite when both summaries have zero spread and differ.
pub fn separation(a: &EstimateSummary, b: &EstimateSummary) -> f64 {
    let se = a.standard_error_of_mean().hypot(b.standard_error_of_mean());
    let diff = b.mean - a.mean;
    if se == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    } else {
        diff / se
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Upper bound on concurrently generated batches.
    pub parallelism: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { parallelism: 1 }
    }
}

/// Generates one batch per seed, in order. Batches are drawn on up to
/// `parallelism` threads; each result carries its batch index on failure.
pub(crate) fn draw_batches(
    backend: &dyn GeneratorBackend,
    prompt: &str,
    seeds: &[(usize, u64)],
    n: usize,
    parallelism: usize,
) -> Vec<Result<SampleBatch>> {
    let p = parallelism
        .min(backend.descriptor().max_parallelism)
        .min(seeds.len())
        .max(1);
    let draw = |&(b, s): &(usize, u64)| generate_checked(backend, prompt, s, n).map_err(|e| e.in_batch(b));
    if p == 1 {
        return seeds.iter().map(draw).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(p).build() {
        Ok(pool) => pool.install(|| seeds.par_iter().map(draw).collect()),
        Err(_) => seeds.iter().map(draw).collect(),
    }
}

pub(crate) fn record_batch(
    sink: &mut dyn RecordSink,
    prompt: &str,
    phase: Phase,
    batch_index: usize,
    batch: &SampleBatch,
) -> Result<()> {
    for (i, y) in batch.iter().enumerate() {
        sink.append(Entry::Sample(SampleRecord {
            prompt: prompt.to_string(),
            phase,
            batch: batch_index,
            index: i,
            id: y.id().to_string(),
            values: y.values().to_vec(),
        }))?;
    }
    Ok(())
}

fn record_estimate(
    sink: &mut dyn RecordSink,
    prompt: &str,
    subject: Subject,
    subject_id: &str,
    batch: usize,
    est: &OriginalityEstimate,
) -> Result<()> {
    sink.append(Entry::Estimate(EstimateRecord {
        prompt: prompt.to_string(),
        subject,
        subject_id: subject_id.to_string(),
        batch,
        metric: est.metric.name().to_string(),
        n: est.n,
        value: est.value,
        distances: est.distances.clone(),
        degenerate: est.n == 1,
    }))?;
    Ok(())
}

fn record_summary(
    sink: &mut dyn RecordSink,
    prompt: &str,
    subject: Subject,
    metric: MetricKind,
    n: usize,
    summary: &EstimateSummary,
) -> Result<()> {
    sink.append(Entry::Summary(SummaryRecord {
        prompt: prompt.to_string(),
        subject,
        metric: metric.name().to_string(),
        m: summary.m(),
        n,
        mean: summary.mean,
        std: summary.std,
        std_convention: STD_CONVENTION.to_string(),
        degenerate: summary.degenerate,
    }))?;
    Ok(())
}

fn check_counts(n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::input(format!("n and m must be at least 1 (got n={n}, m={m})")));
    }
    Ok(())
}

fn stream_seeds(seed_base: u64, tag: u64, count: usize) -> Vec<(usize, u64)> {
    (0..count).map(|b| (b, seed::batch_seed(seed_base, tag, b))).collect()
}

/// Estimates the reference's originality `m` times from independent
/// batches of `n`, recording samples, estimates and the summary.
#[allow(clippy::too_many_arguments)]
pub fn repeated_estimates(
    backend: &dyn GeneratorBackend,
    reference: &Reference,
    conditioning: &Conditioning,
    n: usize,
    m: usize,
    metric: MetricKind,
    opts: RunOptions,
    sink: &mut dyn RecordSink,
) -> Result<EstimateSummary> {
    check_counts(n, m)?;
    conditioning.check_backend(backend)?;
    let prompt = conditioning.prompt.as_str();
    let seeds = stream_seeds(conditioning.seed_base, stream::REFERENCE, m);
    let batches = draw_batches(backend, prompt, &seeds, n, opts.parallelism);
    let mut estimates = Vec::with_capacity(m);
    for (b, batch) in batches.into_iter().enumerate() {
        let batch = batch?;
        record_batch(sink, prompt, Phase::Reference, b, &batch)?;
        let mut est = originality_estimate(reference, &batch, metric).map_err(|e| e.in_batch(b))?;
        est.conditioning = Some(conditioning.clone());
        record_estimate(sink, prompt, Subject::Reference, reference.label(), b, &est)?;
        estimates.push(est);
    }
    let summary = EstimateSummary::from_estimates(estimates)?;
    record_summary(sink, prompt, Subject::Reference, metric, n, &summary)?;
    Ok(summary)
}

/// Originality statistics of the distribution's own samples: `m` fresh
/// probes, each estimated against its own independent batch of `n`.
pub fn typicality_summary(
    backend: &dyn GeneratorBackend,
    conditioning: &Conditioning,
    n: usize,
    m: usize,
    metric: MetricKind,
    opts: RunOptions,
    sink: &mut dyn RecordSink,
) -> Result<EstimateSummary> {
    check_counts(n, m)?;
    conditioning.check_backend(backend)?;
    let prompt = conditioning.prompt.as_str();
    let probe_seeds = stream_seeds(conditioning.seed_base, stream::PROBE, m);
    let batch_seeds = stream_seeds(conditioning.seed_base, stream::TYPICALITY, m);
    let probes = draw_batches(backend, prompt, &probe_seeds, 1, opts.parallelism);
    let batches = draw_batches(backend, prompt, &batch_seeds, n, opts.parallelism);
    let mut estimates = Vec::with_capacity(m);
    for (b, (probe, batch)) in probes.into_iter().zip(batches).enumerate() {
        let probe = probe?;
        let batch = batch?;
        record_batch(sink, prompt, Phase::Probe, b, &probe)?;
        record_batch(sink, prompt, Phase::Typicality, b, &batch)?;
        let subject = &probe.items()[0];
        let mut est = estimate_against(subject, &batch, metric).map_err(|e| e.in_batch(b))?;
        est.conditioning = Some(conditioning.clone());
        record_estimate(sink, prompt, Subject::Probe, subject.id(), b, &est)?;
        estimates.push(est);
    }
    let summary = EstimateSummary::from_estimates(estimates)?;
    record_summary(sink, prompt, Subject::Probe, metric, n, &summary)?;
    Ok(summary)
}

/// Originality of an arbitrary embedding against one fresh batch drawn from
/// the given stream and batch index. Used to rank selected samples.
pub(crate) fn estimate_subject(
    backend: &dyn GeneratorBackend,
    subject: &Embedding,
    conditioning: &Conditioning,
    stream_tag: u64,
    batch_index: usize,
    n: usize,
    metric: MetricKind,
) -> Result<(SampleBatch, OriginalityEstimate)> {
    let s = seed::batch_seed(conditioning.seed_base, stream_tag, batch_index);
    let batch = generate_checked(backend, &conditioning.prompt, s, n).map_err(|e| e.in_batch(batch_index))?;
    let est = estimate_against(subject, &batch, metric)?;
    Ok((batch, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{exact_originality, DiscreteConfig, SyntheticBackend};
    use crate::store::{NullSink, RunManifest};
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new("e", v.to_vec()).unwrap()
    }

    fn two_point() -> (SyntheticBackend, Reference) {
        let cfg = DiscreteConfig::uniform(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        (
            SyntheticBackend::discrete("two-point", cfg).unwrap(),
            Reference::new("r", emb(&[1.0, 0.0])),
        )
    }

    #[test]
    fn identical_samples_give_zero() {
        let r = Reference::new("r", emb(&[0.2, 0.7]));
        let batch = SampleBatch::new(vec![emb(&[0.2, 0.7]); 5]).unwrap();
        assert_eq!(originality_estimate(&r, &batch, MetricKind::Cosine).unwrap().value, 0.0);
    }

    #[test]
    fn mean_of_two_distances() {
        let r = Reference::new("r", emb(&[1.0, 0.0]));
        // cosine similarity 0.8 and 0.6 -> distances 0.2 and 0.4
        let batch = SampleBatch::new(vec![emb(&[0.8, 0.6]), emb(&[0.6, 0.8])]).unwrap();
        let est = originality_estimate(&r, &batch, MetricKind::Cosine).unwrap();
        assert!((est.value - 0.3).abs() < 1e-12);
        assert_eq!(est.n, 2);
        // sample std sqrt(0.02) = 0.1414..., over sqrt(2)
        assert!((standard_error(&est).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let r = Reference::new("r", emb(&[1.0, 0.0]));
        assert!(matches!(
            originality_estimate(&r, &SampleBatch::default(), MetricKind::Cosine),
            Err(Error::Input(_))
        ));
        let batch = SampleBatch::new(vec![emb(&[1.0, 0.0, 0.0])]).unwrap();
        assert!(matches!(originality_estimate(&r, &batch, MetricKind::Cosine), Err(Error::Input(_))));
    }

    #[test]
    fn standard_error_needs_two() {
        let r = Reference::new("r", emb(&[1.0, 0.0]));
        let batch = SampleBatch::new(vec![emb(&[0.3, 0.5])]).unwrap();
        let est = originality_estimate(&r, &batch, MetricKind::Cosine).unwrap();
        assert!(matches!(standard_error(&est), Err(Error::Domain(_))));
        let batch = SampleBatch::new(vec![emb(&[0.3, 0.5]); 4]).unwrap();
        let est = originality_estimate(&r, &batch, MetricKind::Cosine).unwrap();
        assert_eq!(standard_error(&est).unwrap(), 0.0);
    }

    #[test]
    fn two_point_large_n_matches_enumeration() {
        let (backend, r) = two_point();
        let DiscreteConfig { .. } = DiscreteConfig::uniform(vec![]);
        let exact = exact_originality(
            r.embedding(),
            &DiscreteConfig::uniform(vec![vec![0.0, 1.0], vec![1.0, 0.0]]),
            MetricKind::Cosine,
        )
        .unwrap();
        assert_eq!(exact, 0.5);
        let batch = backend.generate("x", 2024, 10_000).unwrap();
        let est = originality_estimate(&r, &batch, MetricKind::Cosine).unwrap();
        assert!((est.value - exact).abs() <= 0.02, "{}", est.value);
    }

    #[test]
    fn point_mass_summaries_are_zero() {
        let backend =
            SyntheticBackend::discrete("pm", DiscreteConfig::uniform(vec![vec![0.6, 0.8]])).unwrap();
        let r = Reference::new("r", emb(&[0.6, 0.8]));
        let cond = Conditioning::for_backend("p", &backend, 3).unwrap();
        let s = repeated_estimates(&backend, &r, &cond, 7, 5, MetricKind::Cosine, RunOptions::default(), &mut NullSink::default()).unwrap();
        assert_eq!((s.mean, s.std), (0.0, 0.0));
        let t = typicality_summary(&backend, &cond, 7, 5, MetricKind::Cosine, RunOptions::default(), &mut NullSink::default()).unwrap();
        assert!(t.values().all(|v| v == 0.0));
    }

    #[test]
    fn two_point_summaries_near_oracle() {
        let (backend, r) = two_point();
        let cond = Conditioning::for_backend("p", &backend, 11).unwrap();
        let opts = RunOptions { parallelism: 4 };
        let s = repeated_estimates(&backend, &r, &cond, 40, 40, MetricKind::Cosine, opts, &mut NullSink::default()).unwrap();
        assert!((s.mean - 0.5).abs() <= 3.0 * s.standard_error_of_mean(), "{} {}", s.mean, s.std);
        // Each probe is one of the two points; either way its expected distance is 0.5.
        let t = typicality_summary(&backend, &cond, 40, 40, MetricKind::Cosine, opts, &mut NullSink::default()).unwrap();
        assert!((t.mean - 0.5).abs() <= 3.0 * t.standard_error_of_mean(), "{} {}", t.mean, t.std);
    }

    #[test]
    fn single_estimate_is_degenerate() {
        let (backend, r) = two_point();
        let cond = Conditioning::for_backend("p", &backend, 1).unwrap();
        let mut m = RunManifest::in_memory("t");
        let s = repeated_estimates(&backend, &r, &cond, 10, 1, MetricKind::Cosine, RunOptions::default(), &mut m).unwrap();
        assert_eq!(s.std, 0.0);
        assert!(s.degenerate);
        let summary = m.records().iter().find_map(|r| match &r.entry {
            Entry::Summary(s) => Some(s.clone()),
            _ => None,
        });
        let summary = summary.unwrap();
        assert!(summary.degenerate);
        assert_eq!(summary.std_convention, "population");
    }

    #[test]
    fn records_everything_in_batch_order() {
        let (backend, r) = two_point();
        let cond = Conditioning::for_backend("p", &backend, 1).unwrap();
        let mut m = RunManifest::in_memory("t");
        repeated_estimates(&backend, &r, &cond, 3, 2, MetricKind::Cosine, RunOptions { parallelism: 2 }, &mut m).unwrap();
        let kinds: Vec<&str> = m.records().iter().map(|r| r.entry.kind()).collect();
        assert_eq!(
            kinds,
            ["sample", "sample", "sample", "estimate", "sample", "sample", "sample", "estimate", "summary"]
        );
    }

    #[test]
    fn deterministic_and_parallelism_independent() {
        let (backend, r) = two_point();
        let cond = Conditioning::for_backend("p", &backend, 99).unwrap();
        let run = |p| {
            repeated_estimates(&backend, &r, &cond, 13, 9, MetricKind::Cosine, RunOptions { parallelism: p }, &mut NullSink::default())
                .unwrap()
        };
        let a = run(1);
        let b = run(8);
        for (x, y) in a.estimates.iter().zip(&b.estimates) {
            assert_eq!(x.distances, y.distances);
        }
    }

    #[test]
    fn wrong_backend_rejected() {
        let (backend, r) = two_point();
        let cond = Conditioning::new("p", "something-else", 0).unwrap();
        assert!(repeated_estimates(&backend, &r, &cond, 2, 2, MetricKind::Cosine, RunOptions::default(), &mut NullSink::default()).is_err());
        assert!(Conditioning::new("", "x", 0).is_err());
    }

    #[test]
    fn quadrupling_n_halves_standard_error() {
        let (backend, r) = two_point();
        let mean_se = |n: usize| {
            (0..100)
                .map(|t| {
                    let batch = backend.generate("p", seed::derive(7, &[n as u64, t]), n).unwrap();
                    standard_error(&originality_estimate(&r, &batch, MetricKind::Cosine).unwrap()).unwrap()
                })
                .sum::<f64>()
                / 100.0
        };
        let ratio = mean_se(160) / mean_se(40);
        assert!((ratio - 0.5).abs() <= 0.1, "ratio {ratio}");
    }

    fn batch_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..6).prop_flat_map(|d| {
            prop::collection::vec(
                prop::collection::vec(-5.0f64..5.0, d).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3)),
                2..40,
            )
        })
    }

    proptest! {
        #[test]
        fn estimate_is_partition_weighted_mean(vs in batch_strategy(), cut_frac in 0.0f64..1.0) {
            let d = vs[0].len();
            let r = Reference::new("r", emb(&vec![1.0; d]));
            let cut = ((vs.len() as f64 * cut_frac) as usize).clamp(1, vs.len() - 1);
            let all = SampleBatch::from_vectors("y", vs.clone()).unwrap();
            let left = SampleBatch::from_vectors("y", vs[..cut].to_vec()).unwrap();
            let right = SampleBatch::from_vectors("y", vs[cut..].to_vec()).unwrap();
            let whole = originality_estimate(&r, &all, MetricKind::Cosine).unwrap().value;
            let a = originality_estimate(&r, &left, MetricKind::Cosine).unwrap().value;
            let b = originality_estimate(&r, &right, MetricKind::Cosine).unwrap().value;
            let weighted = (a * cut as f64 + b * (vs.len() - cut) as f64) / vs.len() as f64;
            prop_assert!((whole - weighted).abs() <= 1e-12);
        }

        #[test]
        fn estimate_is_permutation_invariant(vs in batch_strategy(), rot in 0usize..40) {
            let d = vs[0].len();
            let r = Reference::new("r", emb(&vec![0.5; d]));
            let mut shuffled = vs.clone();
            shuffled.reverse();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            let a = originality_estimate(&r, &SampleBatch::from_vectors("y", vs).unwrap(), MetricKind::Cosine).unwrap();
            let b = originality_estimate(&r, &SampleBatch::from_vectors("y", shuffled).unwrap(), MetricKind::Cosine).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-12);
        }
    }
}
