//! Field-grouped sparse records: schema, vocabulary, encoding, loading,
//! splitting and synthetic generation.

pub mod format;
pub mod schema;
pub mod synthetic;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
pub use format::{load_dataset, DataFormat, LoadReport, MalformedPolicy, RawRecord, RecordReader};
pub use schema::{FieldKind, FieldSchema, Schema};
pub use synthetic::{make_synthetic_dataset, GroundTruth, PlantedPair, SyntheticSpec};
pub use vocab::{build_vocabulary, encode_instance, ContinuousTransform, FieldLayout, VocabConfig, Vocabulary};

/// One non-zero coordinate of an encoded instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub index: usize,
    pub value: f64,
}

impl Feature {
    pub fn one_hot(index: usize) -> Self {
        Self { index, value: 1.0 }
    }
}

/// An encoded record: sorted sparse entries plus a binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseInstance {
    entries: Vec<Feature>,
    label: u8,
}

impl SparseInstance {
    /// Entries are sorted by index; labels other than 0 are treated as 1.
    pub fn new(mut entries: Vec<Feature>, label: u8) -> Self {
        entries.sort_by_key(|e| e.index);
        Self {
            entries,
            label: u8::from(label != 0),
        }
    }

    pub fn entries(&self) -> &[Feature] {
        &self.entries
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = u8::from(label != 0);
        self
    }

    /// Check indices against `layout`: in range, strictly increasing, and at
    /// most one entry per field.
    pub fn validate(&self, layout: &FieldLayout) -> Result<()> {
        let mut last_field = None;
        let mut last_index = None;
        for e in &self.entries {
            let field = layout.field_of(e.index).ok_or(Error::IndexOutOfRange {
                index: e.index,
                dim: layout.dim(),
            })?;
            if last_index.is_some_and(|l| e.index <= l) || last_field == Some(field) {
                return Err(Error::InvalidConfig(format!(
                    "instance has duplicate entries for field {field}"
                )));
            }
            if !e.value.is_finite() {
                return Err(Error::NonFinite(format!("feature {} value", e.index)));
            }
            last_field = Some(field);
            last_index = Some(e.index);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Train,
    Test,
    Synthetic,
}

/// Instances sharing one feature layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<SparseInstance>,
    layout: FieldLayout,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(instances: Vec<SparseInstance>, layout: FieldLayout, provenance: Provenance) -> Result<Self> {
        for x in &instances {
            x.validate(&layout)?;
        }
        Ok(Self {
            instances,
            layout,
            provenance,
        })
    }

    pub fn instances(&self) -> &[SparseInstance] {
        &self.instances
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.instances.iter().filter(|x| x.label == 1).count()
    }

    /// First `n` instances.
    pub fn head(&self, n: usize) -> Self {
        Self {
            instances: self.instances[..n.min(self.len())].to_vec(),
            layout: self.layout.clone(),
            provenance: self.provenance,
        }
    }
}

/// Shuffled indices `0..n` cut into `⌈fraction·n⌉` train and the remaining
/// test positions. Deterministic for a given seed.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    if n == 0 {
        return Err(Error::EmptyInput("cannot split an empty dataset"));
    }
    // guard against 0.9 * 10 = 9.000000000000002 style rounding
    let n_train = ((train_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train);
    Ok((order, test))
}

/// Random partition of `ds` following [`split_indices`].
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), train_fraction, seed)?;
    let pick = |idx: &[usize], provenance| Dataset {
        instances: idx.iter().map(|&i| ds.instances[i].clone()).collect(),
        layout: ds.layout.clone(),
        provenance,
    };
    Ok((pick(&train, Provenance::Train), pick(&test, Provenance::Test)))
}
