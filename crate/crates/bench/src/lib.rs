//! Shared fixtures for the kernel benchmarks.

use deepfm_core::data::{make_synthetic_dataset, Dataset, SyntheticSpec};
use deepfm_core::zoo::{Architecture, Model, ModelSpec};

/// `m` fields of `cardinality` tokens each, `n` planted-interaction rows.
pub fn dataset(m: usize, cardinality: usize, n: usize) -> Dataset {
    let spec = SyntheticSpec {
        cardinalities: vec![cardinality; m],
        ..SyntheticSpec::planted_default()
    };
    make_synthetic_dataset(&spec, n, 7).expect("valid synthetic spec").0
}

/// Model with the default (400-400-400) tower unless `hidden` says otherwise.
pub fn model(arch: Architecture, ds: &Dataset, hidden: Option<Vec<usize>>) -> Model {
    let mut spec = ModelSpec::new(arch);
    if let Some(h) = hidden {
        spec.mlp.hidden_sizes = h;
    }
    spec.pretrain_epochs = 0;
    Model::new(spec, ds.layout(), 1).expect("valid spec")
}
