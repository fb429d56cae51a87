//! Desk-scale scenarios with known qualitative outcomes, and the harness
//! that replays the full protocol on them.
//!
//! Every scenario lives on the unit sphere in 64 dimensions. Directions are
//! drawn from the scenario seed and orthonormalized, so the geometry (and
//! therefore the ordering of true originality values) is fixed by
//! construction while the sampling noise varies with the run seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::backends::{Component, MixtureConfig, SyntheticBackend, SyntheticConfig, SyntheticModel};
use crate::embedding::{Embedding, MetricKind};
use crate::error::{Error, Result};
use crate::estimator::{repeated_estimates, typicality_summary, Conditioning, Reference, RunOptions};
use crate::genericizer::{genericize_stream, quantile, GenericizeSlice};
use crate::seed;
use crate::store::{
    ConfigSnapshot, Entry, ManifestRecord, Phase, RecordSink, ReferenceSnapshot, RunManifest, Subject,
    SummaryRecord, STD_CONVENTION,
};

pub const SCENARIO_DIM: usize = 64;
pub const DEFAULT_SCENARIO_SEED: u64 = 20240607;
/// Margin, in combined standard errors, every ordering expectation must clear.
pub const SE_MARGIN: f64 = 3.0;

/// Label of the planted reference in every scenario config.
pub const PLANTED: &str = "planted";

/// A machine-checkable statement about a protocol run.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expectation {
    /// Reference originality strictly decreases along `prompts`.
    Decreasing { prompts: Vec<String> },
    /// Reference originality under `lower` is below that under `higher`.
    ReferenceBelow { lower: String, higher: String },
    /// Reference originality exceeds the typicality mean.
    AboveTypicality { prompt: String },
    /// Reference originality is below the typicality mean.
    BelowTypicality { prompt: String },
    /// Genericized outputs are less similar to the reference than raw ones,
    /// and none falls in the raw top 1%.
    Suppression { prompt: String },
    /// Genericize phase produced exactly `K * n` samples and `K` selections.
    Accounting { prompt: String },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub config: SyntheticConfig,
    /// Ordered from most abstract to most specific.
    pub prompts: Vec<String>,
    pub reference: Reference,
    pub expectations: Vec<Expectation>,
}

impl Scenario {
    pub fn backend(&self) -> Result<SyntheticBackend> {
        SyntheticBackend::new(self.config.clone())
    }
}

/// `count` orthonormal directions in `dim` dimensions, deterministic in `seed`.
pub fn orthonormal_directions(seed: u64, dim: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(count <= dim);
    let mut rng = seed::rng(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Unit vector at `degrees` from `r` towards the orthogonal direction `u`.
fn tilted(r: &[f64], u: &[f64], degrees: f64) -> Vec<f64> {
    let t = degrees.to_radians();
    r.iter().zip(u).map(|(a, b)| t.cos() * a + t.sin() * b).collect()
}

fn component(weight: f64, mean_direction: Vec<f64>, concentration: f64) -> Component {
    Component {
        weight,
        mean_direction,
        concentration,
    }
}

/// One-hot-ish weight row over `len` components.
fn weights(len: usize, entries: &[(usize, f64)]) -> Vec<f64> {
    let mut w = vec![0.0; len];
    for (i, x) in entries {
        w[*i] = *x;
    }
    w
}

fn build(
    name: &str,
    description: &str,
    components: Vec<Component>,
    prompts: Vec<(&str, Vec<f64>)>,
    reference: Vec<f64>,
    expectations: impl FnOnce(&[String]) -> Vec<Expectation>,
) -> Scenario {
    let names: Vec<String> = prompts.iter().map(|(p, _)| p.to_string()).collect();
    let config = SyntheticConfig {
        id: format!("synthlab:{name}"),
        model: SyntheticModel::Mixture(MixtureConfig {
            components,
            prompt_table: prompts.into_iter().map(|(p, w)| (p.to_string(), w)).collect(),
        }),
        references: BTreeMap::from([(PLANTED.to_string(), reference.clone())]),
    };
    let mut exp = expectations(&names);
    exp.extend(names.iter().map(|p| Expectation::Accounting { prompt: p.clone() }));
    Scenario {
        name: name.to_string(),
        description: description.to_string(),
        config,
        reference: Reference::new(PLANTED, Embedding::new(PLANTED, reference).expect("unit reference")),
        prompts: names,
        expectations: exp,
    }
}

// Per-coordinate noise 0.05 in 64 dimensions keeps samples about 0.93
// cosine from their component mean.
const TIGHT: f64 = 400.0;
const LOOSE: f64 = 100.0;

pub const LADDER_PROMPTS: [&str; 5] = [
    "a bird",
    "a small songbird",
    "a small blue songbird",
    "a small blue songbird with a white crest",
    "a small blue songbird with a white crest and a black collar ring",
];

/// Five prompts from abstract to specific whose conditionals close in on the
/// planted reference.
pub fn scenario_abstraction_ladder(seed: u64) -> Scenario {
    let dirs = orthonormal_directions(seed::derive(seed, &[1]), SCENARIO_DIM, 8);
    let r = &dirs[0];
    // The abstract prompt spreads over three unrelated far modes.
    let mut comps: Vec<Component> = (1..=3).map(|i| component(1.0, tilted(r, &dirs[i], 85.0), TIGHT)).collect();
    for (i, deg) in [70.0, 55.0, 40.0, 25.0].into_iter().enumerate() {
        comps.push(component(1.0, tilted(r, &dirs[4 + i], deg), TIGHT));
    }
    let len = comps.len();
    let mut prompts = vec![(LADDER_PROMPTS[0], weights(len, &[(0, 1.0), (1, 1.0), (2, 1.0)]))];
    for (k, prompt) in LADDER_PROMPTS.iter().enumerate().skip(1) {
        prompts.push((prompt, weights(len, &[(k + 2, 1.0)])));
    }
    build(
        "abstraction_ladder",
        "conditionals concentrate on the planted reference as prompts get more specific",
        comps,
        prompts,
        r.clone(),
        |p| {
            vec![
                Expectation::Decreasing { prompts: p.to_vec() },
                Expectation::AboveTypicality { prompt: p[0].clone() },
            ]
        },
    )
}

/// A broad distribution with a rare distinctive mode at the reference.
pub fn scenario_planted_unique(seed: u64) -> Scenario {
    planted(seed, "planted_unique", 0.08, "a rare distinctive mode sits at the planted reference")
}

/// Control that should fail suppression: the planted mode dominates, so the
/// most generic samples are the ones closest to the reference.
pub fn scenario_negative_control(seed: u64) -> Scenario {
    planted(seed, "negative_control", 0.9, "the planted mode dominates; suppression is expected to fail")
}

fn planted(seed: u64, name: &str, planted_weight: f64, description: &str) -> Scenario {
    let dirs = orthonormal_directions(seed::derive(seed, &[2]), SCENARIO_DIM, 3);
    let r = &dirs[0];
    let bulk = 1.0 - planted_weight;
    let comps = vec![
        component(bulk * 0.65, tilted(r, &dirs[1], 60.0), TIGHT),
        component(bulk * 0.35, tilted(r, &dirs[2], 75.0), TIGHT),
        component(planted_weight, r.clone(), TIGHT),
    ];
    let prompts = vec![
        ("a cartoon mascot", vec![bulk * 0.65, bulk * 0.35, planted_weight]),
        ("a cheerful cartoon mascot waving", vec![bulk * 0.5, bulk * 0.5, planted_weight]),
    ];
    build(name, description, comps, prompts, r.clone(), |p| {
        p.iter().map(|q| Expectation::Suppression { prompt: q.clone() }).collect()
    })
}

pub const FAILURE_PROMPTS: [&str; 3] = [
    "a hero in a video game",
    "a knight in silver armor holding a lantern",
    "a knight in silver armor riding a grey horse",
];

/// The abstract prompt is distorted: its conditional piles up around the
/// planted reference, inverting the usual ordering.
pub fn scenario_failure_mode(seed: u64) -> Scenario {
    failure(seed, false)
}

/// Same geometry as the failure mode with broad weights on the abstract
/// prompt; the normal ordering comes back.
pub fn scenario_failure_mode_restored(seed: u64) -> Scenario {
    failure(seed, true)
}

fn failure(seed: u64, restored: bool) -> Scenario {
    let dirs = orthonormal_directions(seed::derive(seed, &[3]), SCENARIO_DIM, 6);
    let r = &dirs[0];
    let comps = vec![
        // The distortion: a loose mode centred on the reference.
        component(1.0, r.clone(), LOOSE),
        component(1.0, tilted(r, &dirs[1], 85.0), TIGHT),
        component(1.0, tilted(r, &dirs[2], 85.0), TIGHT),
        component(1.0, tilted(r, &dirs[3], 55.0), TIGHT),
        component(1.0, tilted(r, &dirs[4], 60.0), TIGHT),
    ];
    let abstract_weights = if restored {
        weights(5, &[(1, 0.5), (2, 0.5)])
    } else {
        weights(5, &[(0, 0.9), (1, 0.1)])
    };
    let prompts = vec![
        (FAILURE_PROMPTS[0], abstract_weights),
        (FAILURE_PROMPTS[1], weights(5, &[(3, 1.0)])),
        (FAILURE_PROMPTS[2], weights(5, &[(4, 1.0)])),
    ];
    let name = if restored { "failure_mode_restored" } else { "failure_mode" };
    let description = if restored {
        "broad weights on the abstract prompt restore the normal ordering"
    } else {
        "the abstract prompt is distorted towards the planted reference"
    };
    build(name, description, comps, prompts, r.clone(), move |p| {
        let specific = &p[1..];
        if restored {
            let mut v: Vec<Expectation> = specific
                .iter()
                .map(|s| Expectation::ReferenceBelow {
                    lower: s.clone(),
                    higher: p[0].clone(),
                })
                .collect();
            v.push(Expectation::AboveTypicality { prompt: p[0].clone() });
            v
        } else {
            let mut v: Vec<Expectation> = specific
                .iter()
                .map(|s| Expectation::ReferenceBelow {
                    lower: p[0].clone(),
                    higher: s.clone(),
                })
                .collect();
            v.push(Expectation::BelowTypicality { prompt: p[0].clone() });
            v
        }
    })
}

/// The scenarios run by default, in order.
pub fn all_scenarios(seed: u64) -> Vec<Scenario> {
    vec![
        scenario_abstraction_ladder(seed),
        scenario_planted_unique(seed),
        scenario_failure_mode(seed),
        scenario_failure_mode_restored(seed),
    ]
}

pub fn scenario_by_name(name: &str, seed: u64) -> Option<Scenario> {
    match name {
        "negative_control" => Some(scenario_negative_control(seed)),
        _ => all_scenarios(seed).into_iter().find(|s| s.name == name),
    }
}

pub fn scenario_names() -> Vec<&'static str> {
    vec!["abstraction_ladder", "planted_unique", "failure_mode", "failure_mode_restored"]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProtocolConfig {
    /// Samples per originality estimate.
    pub n: usize,
    /// Repeated estimates per prompt.
    pub m: usize,
    /// Genericize batches per prompt.
    pub k: usize,
    /// Samples per genericize batch.
    pub generic_n: usize,
    pub seed_base: u64,
    pub parallelism: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n: 40,
            m: 40,
            k: 250,
            generic_n: 40,
            seed_base: DEFAULT_SCENARIO_SEED,
            parallelism: std::thread::available_parallelism().map_or(1, |p| p.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub expectation: Expectation,
    pub passed: bool,
    /// Signed distance from failure: in combined standard errors for
    /// ordering checks, in similarity units for suppression, in samples for
    /// accounting.
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub scenario: String,
    pub passed: bool,
    pub outcomes: Vec<Outcome>,
    pub genericize_samples: BTreeMap<String, usize>,
    pub elapsed_seconds: f64,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &Outcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let status = if self.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{status} {} ({:.2}s)", self.scenario, self.elapsed_seconds);
        for o in &self.outcomes {
            let _ = writeln!(
                s,
                "  {} {:<52} margin {:>10.3}  {}",
                if o.passed { "ok  " } else { "FAIL" },
                describe(&o.expectation),
                o.margin,
                o.detail
            );
        }
        s
    }
}

fn describe(e: &Expectation) -> String {
    let short = |p: &str| {
        let mut s: String = p.chars().take(18).collect();
        if p.chars().count() > 18 {
            s.push('…');
        }
        s
    };
    match e {
        Expectation::Decreasing { prompts } => format!("decreasing over {} prompts", prompts.len()),
        Expectation::ReferenceBelow { lower, higher } => format!("ref({}) < ref({})", short(lower), short(higher)),
        Expectation::AboveTypicality { prompt } => format!("ref > typical ({})", short(prompt)),
        Expectation::BelowTypicality { prompt } => format!("ref < typical ({})", short(prompt)),
        Expectation::Suppression { prompt } => format!("suppression ({})", short(prompt)),
        Expectation::Accounting { prompt } => format!("sample accounting ({})", short(prompt)),
    }
}

/// Mean and standard error of the mean from a recorded summary.
#[derive(Debug, Clone, Copy)]
struct Stat {
    mean: f64,
    se: f64,
}

impl From<&SummaryRecord> for Stat {
    fn from(s: &SummaryRecord) -> Self {
        Stat {
            mean: s.mean,
            se: s.std / (s.m as f64).sqrt(),
        }
    }
}

/// How many combined standard errors `high` sits above `low`.
fn margin(low: Stat, high: Stat) -> f64 {
    let se = low.se.hypot(high.se);
    let diff = high.mean - low.mean;
    if se == 0.0 {
        if diff > 0.0 {
            f64::INFINITY
        } else if diff < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    } else {
        diff / se
    }
}

fn ordering(low: Stat, high: Stat) -> (bool, f64, String) {
    let m = margin(low, high);
    (
        m > SE_MARGIN,
        m,
        format!("{:.4} vs {:.4} (combined SE {:.4})", low.mean, high.mean, low.se.hypot(high.se)),
    )
}

fn summary(records: &[ManifestRecord], prompt: &str, subject: Subject) -> Result<Stat> {
    records
        .iter()
        .find_map(|r| match &r.entry {
            Entry::Summary(s) if s.prompt == prompt && s.subject == subject => Some(Stat::from(s)),
            _ => None,
        })
        .ok_or_else(|| Error::State(format!("no {subject:?} summary recorded for {prompt:?}")))
}

/// Evaluates one expectation against the records of a run.
pub fn evaluate(
    expectation: &Expectation,
    records: &[ManifestRecord],
    reference: &Reference,
    metric: MetricKind,
    cfg: &ProtocolConfig,
) -> Result<Outcome> {
    let reference_stat = |p: &str| summary(records, p, Subject::Reference);
    let typical_stat = |p: &str| summary(records, p, Subject::Probe);
    let (passed, margin_value, detail) = match expectation {
        Expectation::Decreasing { prompts } => {
            let stats = prompts.iter().map(|p| reference_stat(p)).collect::<Result<Vec<_>>>()?;
            let margins: Vec<f64> = stats.windows(2).map(|w| margin(w[1], w[0])).collect();
            let worst = margins.iter().cloned().fold(f64::INFINITY, f64::min);
            let means: Vec<String> = stats.iter().map(|s| format!("{:.4}", s.mean)).collect();
            (worst > SE_MARGIN, worst, format!("means {}", means.join(" > ")))
        }
        Expectation::ReferenceBelow { lower, higher } => ordering(reference_stat(lower)?, reference_stat(higher)?),
        Expectation::AboveTypicality { prompt } => ordering(typical_stat(prompt)?, reference_stat(prompt)?),
        Expectation::BelowTypicality { prompt } => ordering(reference_stat(prompt)?, typical_stat(prompt)?),
        Expectation::Suppression { prompt } => {
            let slice = GenericizeSlice::from_records(records, prompt)?;
            let report = crate::genericizer::similarity_report(
                reference,
                &slice,
                metric,
                crate::genericizer::DEFAULT_BINS,
                crate::genericizer::Binning::Observed,
            )?;
            let raw95 = quantile(&report.raw_similarities, 0.95).unwrap_or(f64::NAN);
            let sel95 = quantile(&report.selected_similarities, 0.95).unwrap_or(f64::NAN);
            let top1 = quantile(&report.raw_similarities, 0.99).unwrap_or(f64::NAN);
            let in_band = report.selected_similarities.iter().filter(|s| **s > top1).count();
            let max_sel = report.selected_similarities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (
                sel95 < raw95 && in_band == 0,
                (raw95 - sel95).min(top1 - max_sel),
                format!("p95 selected {sel95:.4} vs raw {raw95:.4}; raw p99 {top1:.4}, {in_band} selection(s) above"),
            )
        }
        Expectation::Accounting { prompt } => {
            let samples = genericize_count(records, prompt);
            let selections = records
                .iter()
                .filter(|r| matches!(&r.entry, Entry::Selection(s) if s.prompt == *prompt))
                .count();
            let expected = cfg.k * cfg.generic_n;
            (
                samples == expected && selections == cfg.k,
                0.0 - (samples as f64 - expected as f64).abs(),
                format!("{samples} samples (expected {expected}), {selections} selections"),
            )
        }
    };
    Ok(Outcome {
        expectation: expectation.clone(),
        passed,
        margin: margin_value,
        detail,
    })
}

fn genericize_count(records: &[ManifestRecord], prompt: &str) -> usize {
    records
        .iter()
        .filter(|r| matches!(&r.entry, Entry::Sample(s) if s.phase == Phase::Genericize && s.prompt == prompt))
        .count()
}

/// Runs estimation, typicality and genericization for every prompt of the
/// scenario, recording into `sink`.
pub fn replay(
    scenario: &Scenario,
    metric: MetricKind,
    cfg: &ProtocolConfig,
    sink: &mut dyn RecordSink,
) -> Result<()> {
    let backend = scenario.backend()?;
    let config_hash = crate::store::content_hash(&serde_json::to_vec(&scenario.config)?);
    sink.append(Entry::Config(ConfigSnapshot {
        command: format!("validate:{}", scenario.name),
        backend: scenario.config.id.clone(),
        metric: metric.name().to_string(),
        prompts: scenario.prompts.clone(),
        n: cfg.generic_n,
        m: Some(cfg.m),
        k: Some(cfg.k),
        seed_base: cfg.seed_base,
        bins: crate::genericizer::DEFAULT_BINS,
        parallelism: cfg.parallelism,
        cache: false,
        std_convention: STD_CONVENTION.to_string(),
        content_hash: config_hash,
        reference: Some(ReferenceSnapshot {
            label: scenario.reference.label().to_string(),
            values: scenario.reference.embedding().values().to_vec(),
        }),
    }))?;
    let opts = RunOptions {
        parallelism: cfg.parallelism,
    };
    for prompt in &scenario.prompts {
        let cond = Conditioning::for_backend(prompt.clone(), &backend, cfg.seed_base)?;
        repeated_estimates(&backend, &scenario.reference, &cond, cfg.n, cfg.m, metric, opts, sink)?;
        typicality_summary(&backend, &cond, cfg.n, cfg.m, metric, opts, sink)?;
        genericize_stream(&backend, &cond, cfg.k, cfg.generic_n, metric, opts, sink)?;
    }
    Ok(())
}

/// Replays the protocol in memory and evaluates every expectation.
/// Failed expectations mark the report failed; only infrastructure problems
/// are errors.
pub fn run_protocol(scenario: &Scenario, metric: MetricKind, cfg: &ProtocolConfig) -> Result<ValidationReport> {
    run_with_manifest(scenario, metric, cfg).map(|(report, _)| report)
}

/// Like [`run_protocol`], also returning the in-memory manifest.
pub fn run_with_manifest(
    scenario: &Scenario,
    metric: MetricKind,
    cfg: &ProtocolConfig,
) -> Result<(ValidationReport, RunManifest)> {
    let start = Instant::now();
    let mut manifest = RunManifest::in_memory(&scenario.name);
    replay(scenario, metric, cfg, &mut manifest)?;
    let records = manifest.records();
    let outcomes = scenario
        .expectations
        .iter()
        .map(|e| evaluate(e, records, &scenario.reference, metric, cfg))
        .collect::<Result<Vec<_>>>()?;
    let genericize_samples = scenario
        .prompts
        .iter()
        .map(|p| (p.clone(), genericize_count(records, p)))
        .collect();
    let report = ValidationReport {
        scenario: scenario.name.clone(),
        passed: outcomes.iter().all(|o| o.passed),
        outcomes,
        genericize_samples,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{DiscreteConfig, GeneratorBackend};
    use crate::estimator::originality_estimate;

    fn small() -> ProtocolConfig {
        ProtocolConfig {
            n: 20,
            m: 20,
            k: 10,
            generic_n: 10,
            seed_base: 7,
            parallelism: 2,
        }
    }

    #[test]
    fn directions_are_orthonormal_and_deterministic() {
        let d = orthonormal_directions(3, SCENARIO_DIM, 8);
        for (i, a) in d.iter().enumerate() {
            for (j, b) in d.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        assert_eq!(d, orthonormal_directions(3, SCENARIO_DIM, 8));
    }

    #[test]
    fn scenarios_are_valid_and_deterministic() {
        for s in all_scenarios(1).into_iter().chain([scenario_negative_control(1)]) {
            assert!(!s.prompts.is_empty());
            let backend = s.backend().unwrap();
            assert_eq!(backend.descriptor().dim, Some(SCENARIO_DIM));
            assert_eq!(s.config.reference(PLANTED).unwrap().values(), s.reference.embedding().values());
            assert_eq!(scenario_by_name(&s.name, 1).unwrap().config, s.config);
        }
        assert!(scenario_by_name("nope", 1).is_none());
        assert_eq!(scenario_names(), all_scenarios(0).iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    }

    /// High-n estimates stand in for the true values of mixtures.
    fn oracle(s: &Scenario, prompt: &str) -> f64 {
        let b = s.backend().unwrap();
        let batch = b.generate(prompt, 991, 20_000).unwrap();
        originality_estimate(&s.reference, &batch, MetricKind::Cosine).unwrap().value
    }

    #[test]
    fn ladder_true_values_are_monotone() {
        let s = scenario_abstraction_ladder(DEFAULT_SCENARIO_SEED);
        let v: Vec<f64> = s.prompts.iter().map(|p| oracle(&s, p)).collect();
        assert!(v.windows(2).all(|w| w[0] > w[1] + 0.05), "{v:?}");
    }

    #[test]
    fn failure_mode_truth_inverts_and_restores() {
        let f = scenario_failure_mode(DEFAULT_SCENARIO_SEED);
        let a = oracle(&f, FAILURE_PROMPTS[0]);
        for p in &FAILURE_PROMPTS[1..] {
            assert!(a + 0.1 < oracle(&f, p));
        }
        let r = scenario_failure_mode_restored(DEFAULT_SCENARIO_SEED);
        let a = oracle(&r, FAILURE_PROMPTS[0]);
        for p in &FAILURE_PROMPTS[1..] {
            assert!(a > oracle(&r, p) + 0.1);
        }
    }

    #[test]
    fn point_mass_prompt_gives_zero() {
        let s = scenario_abstraction_ladder(1);
        let point = DiscreteConfig::uniform(vec![s.reference.embedding().values().to_vec()]);
        let b = SyntheticBackend::discrete("pm", point).unwrap();
        let batch = b.generate("anything", 0, 30).unwrap();
        assert_eq!(originality_estimate(&s.reference, &batch, MetricKind::Cosine).unwrap().value, 0.0);
    }

    #[test]
    fn small_protocol_passes_accounting() {
        let s = scenario_planted_unique(DEFAULT_SCENARIO_SEED);
        let (report, manifest) = run_with_manifest(&s, MetricKind::Cosine, &small()).unwrap();
        for count in report.genericize_samples.values() {
            assert_eq!(*count, 100);
        }
        crate::store::check_invariants(manifest.records()).unwrap();
        let accounting: Vec<&Outcome> = report
            .outcomes
            .iter()
            .filter(|o| matches!(o.expectation, Expectation::Accounting { .. }))
            .collect();
        assert_eq!(accounting.len(), 2);
        assert!(accounting.iter().all(|o| o.passed));
        assert!(report.to_text().contains("planted_unique"));
        assert!(report.to_json().unwrap().contains("\"kind\": \"accounting\""));
    }

    #[test]
    fn margin_edge_cases() {
        let z = Stat { mean: 0.0, se: 0.0 };
        let one = Stat { mean: 1.0, se: 0.0 };
        assert_eq!(margin(z, one), f64::INFINITY);
        assert_eq!(margin(one, z), f64::NEG_INFINITY);
        assert_eq!(margin(z, z), 0.0);
        let a = Stat { mean: 0.0, se: 3.0 };
        let b = Stat { mean: 10.0, se: 4.0 };
        assert_eq!(margin(a, b), 2.0);
    }
}
