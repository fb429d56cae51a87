//! Synthetic backends with known structure.
//!
//! A [`DiscreteConfig`] has finite support, so its expected distance to any
//! reference can be enumerated exactly. A [`MixtureConfig`] draws from
//! Gaussian-perturbed unit directions projected back onto the sphere. Both
//! support per-prompt weight overrides, which is how conditioning
//! specificity is modeled: a prompt absent from the table uses base weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BackendDescriptor, GeneratorBackend};
use crate::embedding::{Embedding, MetricKind, SampleBatch};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub weight: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteConfig {
    pub support: Vec<Atom>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompt_table: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean_direction: Vec<f64>,
    /// Inverse variance of the per-coordinate Gaussian perturbation.
    pub concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub components: Vec<Component>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompt_table: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticModel {
    Discrete(DiscreteConfig),
    Mixture(MixtureConfig),
}

/// On-disk form of a synthetic backend (`--mixture-config`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub id: String,
    #[serde(flatten)]
    pub model: SyntheticModel,
    /// Named reference vectors addressable from the command line.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub references: BTreeMap<String, Vec<f64>>,
}

impl SyntheticConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn reference(&self, label: &str) -> Result<Embedding> {
        let values = self
            .references
            .get(label)
            .ok_or_else(|| Error::input(format!("no reference named {label:?} in {}", self.id)))?;
        Embedding::new(label, values.clone())
    }
}

#[derive(Debug, Clone)]
struct Weights {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Weights {
    fn new(raw: &[f64], expected: usize, strict: bool, what: &str) -> Result<Self> {
        if raw.len() != expected {
            return Err(Error::input(format!(
                "{what}: {} weights given for {expected} entries",
                raw.len()
            )));
        }
        if let Some(w) = raw
            .iter()
            .find(|w| !w.is_finite() || **w < 0.0 || (strict && **w == 0.0))
        {
            return Err(Error::input(format!("{what}: invalid weight {w}")));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::input(format!("{what}: weights sum to zero")));
        }
        let probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        // Pin the last positive-weight boundary to exactly 1.
        if let Some(last) = probs.iter().rposition(|p| *p > 0.0) {
            for c in &mut cumulative[last..] {
                *c = 1.0;
            }
        }
        Ok(Weights { probs, cumulative })
    }

    fn pick(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.probs.len() - 1)
    }
}

#[derive(Debug, Clone)]
struct WeightTable {
    base: Weights,
    overrides: BTreeMap<String, Weights>,
}

impl WeightTable {
    fn new(base: &[f64], table: &BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let n = base.len();
        let base = Weights::new(base, n, true, "base weights")?;
        let overrides = table
            .iter()
            .map(|(prompt, w)| Ok((prompt.clone(), Weights::new(w, n, false, prompt)?)))
            .collect::<Result<_>>()?;
        Ok(WeightTable { base, overrides })
    }

    fn for_prompt(&self, prompt: &str) -> &Weights {
        self.overrides.get(prompt).unwrap_or(&self.base)
    }
}

#[derive(Debug, Clone)]
struct PreparedComponent {
    mean: Vec<f64>,
    sigma: f64,
}

#[derive(Debug, Clone)]
enum Prepared {
    Discrete { atoms: Vec<Embedding>, weights: WeightTable },
    Mixture { components: Vec<PreparedComponent>, weights: WeightTable },
}

impl DiscreteConfig {
    /// Exactly uniform support over the given points.
    pub fn uniform(points: Vec<Vec<f64>>) -> Self {
        DiscreteConfig {
            support: points
                .into_iter()
                .map(|values| Atom { weight: 1.0, values })
                .collect(),
            prompt_table: BTreeMap::new(),
        }
    }

    fn prepare(&self) -> Result<Prepared> {
        if self.support.is_empty() {
            return Err(Error::input("discrete support is empty"));
        }
        let atoms = self
            .support
            .iter()
            .enumerate()
            .map(|(i, a)| Embedding::new(format!("atom{i}"), a.values.clone()))
            .collect::<Result<Vec<_>>>()?;
        SampleBatch::new(atoms.clone())?;
        let base: Vec<f64> = self.support.iter().map(|a| a.weight).collect();
        Ok(Prepared::Discrete {
            atoms,
            weights: WeightTable::new(&base, &self.prompt_table)?,
        })
    }

    /// `sum_k w_k * d(reference, atom_k)` under the weights in force for `prompt`.
    pub fn exact_originality_for(
        &self,
        reference: &Embedding,
        prompt: Option<&str>,
        metric: MetricKind,
    ) -> Result<f64> {
        let Prepared::Discrete { atoms, weights } = self.prepare()? else {
            unreachable!()
        };
        let w = prompt.map_or(&weights.base, |p| weights.for_prompt(p));
        let mut total = 0.0;
        for (p, atom) in w.probs.iter().zip(&atoms) {
            total += p * metric.distance(reference, atom)?;
        }
        Ok(total)
    }
}

/// Expected distance from `reference` to a draw from `config` (base weights).
pub fn exact_originality(
    reference: &Embedding,
    config: &DiscreteConfig,
    metric: MetricKind,
) -> Result<f64> {
    config.exact_originality_for(reference, None, metric)
}

impl MixtureConfig {
    fn prepare(&self) -> Result<Prepared> {
        if self.components.is_empty() {
            return Err(Error::input("mixture has no components"));
        }
        let dim = self.components[0].mean_direction.len();
        let mut components = Vec::with_capacity(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            if c.mean_direction.len() != dim {
                return Err(Error::input(format!(
                    "component {i} has dimension {}, expected {dim}",
                    c.mean_direction.len()
                )));
            }
            if !(c.concentration > 0.0 && c.concentration.is_finite()) {
                return Err(Error::input(format!(
                    "component {i} concentration must be positive, got {}",
                    c.concentration
                )));
            }
            let mean = crate::embedding::normalize(&Embedding::new(
                format!("component{i}"),
                c.mean_direction.clone(),
            )?)?
            .into_values();
            components.push(PreparedComponent {
                mean,
                sigma: c.concentration.sqrt().recip(),
            });
        }
        let base: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
        Ok(Prepared::Mixture {
            components,
            weights: WeightTable::new(&base, &self.prompt_table)?,
        })
    }
}

impl SyntheticModel {
    pub fn dim(&self) -> usize {
        match self {
            SyntheticModel::Discrete(d) => d.support.first().map_or(0, |a| a.values.len()),
            SyntheticModel::Mixture(m) => m.components.first().map_or(0, |c| c.mean_direction.len()),
        }
    }
}

/// A validated synthetic backend ready for sampling.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    id: String,
    dim: usize,
    prepared: Prepared,
    config: SyntheticConfig,
}

impl SyntheticBackend {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        let prepared = match &config.model {
            SyntheticModel::Discrete(d) => d.prepare()?,
            SyntheticModel::Mixture(m) => m.prepare()?,
        };
        let dim = config.model.dim();
        for (label, values) in &config.references {
            if values.len() != dim {
                return Err(Error::input(format!(
                    "reference {label:?} has dimension {}, backend has {dim}",
                    values.len()
                )));
            }
        }
        Ok(SyntheticBackend {
            id: config.id.clone(),
            dim,
            prepared,
            config,
        })
    }

    pub fn discrete(id: impl Into<String>, config: DiscreteConfig) -> Result<Self> {
        Self::new(SyntheticConfig {
            id: id.into(),
            model: SyntheticModel::Discrete(config),
            references: BTreeMap::new(),
        })
    }

    pub fn mixture(id: impl Into<String>, config: MixtureConfig) -> Result<Self> {
        Self::new(SyntheticConfig {
            id: id.into(),
            model: SyntheticModel::Mixture(config),
            references: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    /// Like [`GeneratorBackend::generate`], also reporting which support
    /// point or component produced each sample.
    pub fn generate_labeled(
        &self,
        prompt: &str,
        seed: u64,
        count: usize,
    ) -> Result<Vec<(usize, Embedding)>> {
        (0..count)
            .map(|i| {
                let mut rng = seed::rng(seed::sample_seed(seed, i));
                let id = format!("syn-{seed:016x}-{i:04}");
                match &self.prepared {
                    Prepared::Discrete { atoms, weights } => {
                        let k = weights.for_prompt(prompt).pick(&mut rng);
                        Ok((k, atoms[k].clone().with_id(id)))
                    }
                    Prepared::Mixture { components, weights } => {
                        let k = weights.for_prompt(prompt).pick(&mut rng);
                        let c = &components[k];
                        let values: Vec<f64> = c
                            .mean
                            .iter()
                            .map(|m| m + c.sigma * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        let e = crate::embedding::normalize(&Embedding::new(id, values)?)?;
                        Ok((k, e))
                    }
                }
            })
            .collect()
    }
}

impl GeneratorBackend for SyntheticBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            id: self.id.clone(),
            dim: Some(self.dim),
            supports_raw_content: false,
            max_parallelism: usize::MAX,
        }
    }

    fn generate(&self, prompt: &str, seed: u64, count: usize) -> Result<SampleBatch> {
        let items = self
            .generate_labeled(prompt, seed, count)?
            .into_iter()
            .map(|(_, e)| e)
            .collect();
        SampleBatch::new(items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> DiscreteConfig {
        DiscreteConfig::uniform(vec![vec![0.0, 1.0], vec![1.0, 0.0]])
    }

    fn unit(x: f64, y: f64) -> Embedding {
        Embedding::new("r", vec![x, y]).unwrap()
    }

    #[test]
    fn single_point_support_repeats() {
        let b = SyntheticBackend::discrete("one", DiscreteConfig::uniform(vec![vec![0.3, 0.4]]))
            .unwrap();
        let batch = b.generate("anything", 9, 25).unwrap();
        assert_eq!(batch.len(), 25);
        assert!(batch.iter().all(|e| e.values() == [0.3, 0.4]));
    }

    #[test]
    fn two_point_frequencies() {
        let b = SyntheticBackend::discrete("two", two_point()).unwrap();
        let labels = b.generate_labeled("p", 1234, 10_000).unwrap();
        let ones = labels.iter().filter(|(k, _)| *k == 1).count() as f64 / 10_000.0;
        assert!((ones - 0.5).abs() <= 0.02, "{ones}");
    }

    #[test]
    fn deterministic_per_prompt_and_seed() {
        let b = SyntheticBackend::discrete("two", two_point()).unwrap();
        assert_eq!(b.generate("p", 5, 40).unwrap(), b.generate("p", 5, 40).unwrap());
        assert_ne!(b.generate("p", 5, 40).unwrap(), b.generate("p", 6, 40).unwrap());
    }

    #[test]
    fn exact_originality_examples() {
        let single = DiscreteConfig::uniform(vec![vec![1.0, 0.0]]);
        assert_eq!(exact_originality(&unit(1.0, 0.0), &single, MetricKind::Cosine).unwrap(), 0.0);
        // 0.5 * 0 + 0.5 * 1
        let v = exact_originality(&unit(1.0, 0.0), &two_point(), MetricKind::Cosine).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        // 0.5 * 1 + 0.5 * 2
        let far = DiscreteConfig::uniform(vec![vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let v = exact_originality(&unit(1.0, 0.0), &far, MetricKind::Cosine).unwrap();
        assert!((v - 1.5).abs() < 1e-15);
    }

    #[test]
    fn prompt_overrides_and_zero_weights() {
        let mut cfg = two_point();
        cfg.prompt_table.insert("only-x".into(), vec![0.0, 3.0]);
        let b = SyntheticBackend::discrete("two", cfg.clone()).unwrap();
        let batch = b.generate("only-x", 77, 200).unwrap();
        assert!(batch.iter().all(|e| e.values() == [1.0, 0.0]));
        let v = cfg
            .exact_originality_for(&unit(1.0, 0.0), Some("only-x"), MetricKind::Cosine)
            .unwrap();
        assert_eq!(v, 0.0);
        // unknown prompt falls back to base weights
        let v = cfg
            .exact_originality_for(&unit(1.0, 0.0), Some("unlisted"), MetricKind::Cosine)
            .unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(SyntheticBackend::discrete("e", DiscreteConfig::uniform(vec![])).is_err());
        let mut bad = two_point();
        bad.support[0].weight = 0.0;
        assert!(SyntheticBackend::discrete("z", bad).is_err());
        let mut bad = two_point();
        bad.prompt_table.insert("p".into(), vec![1.0]);
        assert!(SyntheticBackend::discrete("len", bad).is_err());
        let mix = MixtureConfig {
            components: vec![Component {
                weight: 1.0,
                mean_direction: vec![1.0, 0.0],
                concentration: 0.0,
            }],
            prompt_table: BTreeMap::new(),
        };
        assert!(SyntheticBackend::mixture("m", mix).is_err());
    }

    #[test]
    fn mixture_samples_are_unit_and_near_mean() {
        let mix = MixtureConfig {
            components: vec![Component {
                weight: 1.0,
                mean_direction: vec![3.0, 0.0, 0.0, 0.0],
                concentration: 400.0,
            }],
            prompt_table: BTreeMap::new(),
        };
        let b = SyntheticBackend::mixture("m", mix).unwrap();
        let mean = Embedding::new("m", vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        for e in b.generate("p", 3, 100).unwrap().iter() {
            assert!((e.norm() - 1.0).abs() < 1e-12);
            assert!(MetricKind::Cosine.distance(&mean, e).unwrap() < 0.05);
        }
    }

    #[test]
    fn config_json_roundtrip() {
        let mut cfg = SyntheticConfig {
            id: "demo".into(),
            model: SyntheticModel::Discrete(two_point()),
            references: BTreeMap::new(),
        };
        cfg.references.insert("x".into(), vec![1.0, 0.0]);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"kind\":\"discrete\""));
        let back: SyntheticConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.reference("x").unwrap().values(), [1.0, 0.0]);
        assert!(back.reference("y").is_err());
    }
}
