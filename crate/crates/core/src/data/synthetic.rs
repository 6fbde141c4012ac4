//! Planted-interaction datasets with known ground truth.
//!
//! Every field is categorical with tokens `"0".."c-1"` drawn uniformly. The
//! true logit is
//!
//! ```text
//! bias + Σ_f linear[f][t_f] + Σ_pairs strength · ⟨u_a[t_a], u_b[t_b]⟩
//! ```
//!
//! with the per-token factors `u` drawn from `N(0, 1/rank)`, so each pair
//! term has roughly unit variance before scaling. Labels are
//! `Bernoulli(sigmoid(logit))`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schema::{FieldKind, FieldSchema};
use super::vocab::{FieldEncoding, FieldLayout, FieldVocab, VocabConfig, Vocabulary};
use super::{Dataset, Feature, Provenance, SparseInstance};
use crate::error::{Error, Result};
use crate::math::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub field_a: usize,
    pub field_b: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub cardinalities: Vec<usize>,
    pub bias: f64,
    /// Standard deviation of the per-token linear coefficients.
    pub linear_scale: f64,
    pub pairs: Vec<PlantedPair>,
    /// Dimension of the planted interaction factors.
    pub rank: usize,
    /// Seeds the ground-truth coefficients; instances use their own seed so
    /// train and test samples can share one truth.
    pub truth_seed: u64,
}

impl SyntheticSpec {
    /// Ten fields of 40 tokens each, moderate linear effects and three strong
    /// rank-2 pairwise interactions. The default for desk-scale runs.
    pub fn planted_default() -> Self {
        Self {
            cardinalities: vec![40; 10],
            bias: -0.5,
            linear_scale: 0.3,
            pairs: vec![
                PlantedPair { field_a: 0, field_b: 1, strength: 1.5 },
                PlantedPair { field_a: 2, field_b: 3, strength: 1.5 },
                PlantedPair { field_a: 4, field_b: 5, strength: 1.5 },
            ],
            rank: 2,
            truth_seed: 2017,
        }
    }

    /// Same fields as [`Self::planted_default`] with no interaction terms.
    pub fn linear_only() -> Self {
        Self {
            linear_scale: 0.8,
            pairs: Vec::new(),
            ..Self::planted_default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() {
            return Err(Error::config("synthetic spec needs at least one field"));
        }
        if let Some(f) = self.cardinalities.iter().position(|&c| c < 1) {
            return Err(Error::config(format!("field {f} has cardinality < 1")));
        }
        if !(self.linear_scale.is_finite() && self.linear_scale >= 0.0) {
            return Err(Error::config("linear_scale must be finite and non-negative"));
        }
        if !self.pairs.is_empty() && self.rank == 0 {
            return Err(Error::config("interaction rank must be positive"));
        }
        let m = self.cardinalities.len();
        for p in &self.pairs {
            if p.field_a >= m || p.field_b >= m || p.field_a == p.field_b {
                return Err(Error::config(format!("bad planted pair ({}, {})", p.field_a, p.field_b)));
            }
        }
        Ok(())
    }

    /// Vocabulary whose tokens are the decimal token ids; each field also has
    /// the usual OOV slot (never generated).
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        self.validate()?;
        let fields = self
            .cardinalities
            .iter()
            .enumerate()
            .map(|(i, &c)| FieldVocab {
                schema: FieldSchema {
                    field_id: i,
                    kind: FieldKind::Categorical,
                    name: format!("s{i}"),
                },
                encoding: FieldEncoding::Categorical {
                    tokens: (0..c).map(|t| (t.to_string(), t)).collect::<HashMap<_, _>>(),
                },
            })
            .collect();
        Vocabulary::new(fields, VocabConfig { min_count: 1, ..VocabConfig::default() })
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.truth_seed);
        let lin = Normal::new(0.0, self.linear_scale.max(f64::MIN_POSITIVE)).expect("valid std");
        let linear = self
            .cardinalities
            .iter()
            .map(|&c| {
                (0..c)
                    .map(|_| if self.linear_scale == 0.0 { 0.0 } else { lin.sample(&mut rng) })
                    .collect()
            })
            .collect();
        let fac = Normal::new(0.0, 1.0 / (self.rank.max(1) as f64).sqrt()).expect("valid std");
        let factors = |card: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..card).map(|_| (0..self.rank).map(|_| fac.sample(rng)).collect()).collect()
        };
        let pairs = self
            .pairs
            .iter()
            .map(|p| PlantedTerm {
                pair: *p,
                factors_a: factors(self.cardinalities[p.field_a], &mut rng),
                factors_b: factors(self.cardinalities[p.field_b], &mut rng),
            })
            .collect();
        Ok(GroundTruth {
            bias: self.bias,
            linear,
            pairs,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTerm {
    pub pair: PlantedPair,
    pub factors_a: Vec<Vec<f64>>,
    pub factors_b: Vec<Vec<f64>>,
}

/// The coefficients behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bias: f64,
    pub linear: Vec<Vec<f64>>,
    pub pairs: Vec<PlantedTerm>,
}

impl GroundTruth {
    /// True logit of a record given its per-field token ids.
    pub fn logit(&self, tokens: &[usize]) -> f64 {
        let mut z = self.bias;
        for (f, &t) in tokens.iter().enumerate() {
            z += self.linear[f][t];
        }
        for term in &self.pairs {
            let a = &term.factors_a[tokens[term.pair.field_a]];
            let b = &term.factors_b[tokens[term.pair.field_b]];
            z += term.pair.strength * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
        z
    }

    /// True logit of an encoded synthetic instance.
    pub fn logit_of(&self, x: &SparseInstance, layout: &FieldLayout) -> f64 {
        let tokens: Vec<usize> = x
            .entries()
            .iter()
            .map(|e| {
                let field = layout.field_of(e.index).expect("synthetic index in range");
                e.index - layout.offsets()[field]
            })
            .collect();
        self.logit(&tokens)
    }
}

/// Draw `n` instances from the planted model. Returns the dataset and its
/// ground truth.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<(Dataset, GroundTruth)> {
    let vocab = spec.vocabulary()?;
    let truth = spec.ground_truth()?;
    let layout = vocab.layout().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = vec![0usize; spec.cardinalities.len()];
    let instances = (0..n)
        .map(|_| {
            for (t, &c) in tokens.iter_mut().zip(&spec.cardinalities) {
                *t = rng.random_range(0..c);
            }
            let p = sigmoid(truth.logit(&tokens));
            let label = u8::from(rng.random::<f64>() < p);
            let entries = tokens
                .iter()
                .enumerate()
                .map(|(f, &t)| Feature::one_hot(layout.offsets()[f] + t))
                .collect();
            SparseInstance::new(entries, label)
        })
        .collect();
    Ok((Dataset::new(instances, layout, Provenance::Synthetic)?, truth))
}
