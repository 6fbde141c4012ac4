//! Run configuration, read from and snapshotted to TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sweep::{ShapeKind, SweepAxis};
use crate::data::{DataFormat, MalformedPolicy, SyntheticSpec, VocabConfig};
use crate::error::{Error, Result};
use crate::math::{Activation, InitScheme};
use crate::optim::OptimizerConfig;
use crate::zoo::{Architecture, CrossConfig, ModelSpec, ProductKind};

/// Optional per-model settings layered over [`ModelSpec::new`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub k: Option<usize>,
    pub hidden_sizes: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub dropout_keep: Option<f64>,
    pub dropout_on_embedding: Option<bool>,
    pub literal_sigmoid_head: Option<bool>,
    pub product_kind: Option<ProductKind>,
    pub pretrain_epochs: Option<usize>,
    pub embedding_std: Option<f64>,
    pub use_bias: Option<bool>,
    pub cross: Option<CrossConfig>,
    pub optimizer: Option<OptimizerConfig>,
    /// Adam step size or FTRL alpha, whichever the model uses.
    pub learning_rate: Option<f64>,
}

impl ModelOverrides {
    /// `other` wins wherever it sets a value.
    pub fn merged(&self, other: &ModelOverrides) -> ModelOverrides {
        macro_rules! pick {
            ($($f:ident),*) => {
                ModelOverrides { $($f: other.$f.clone().or_else(|| self.$f.clone())),* }
            };
        }
        pick!(
            k,
            hidden_sizes,
            activation,
            dropout_keep,
            dropout_on_embedding,
            literal_sigmoid_head,
            product_kind,
            pretrain_epochs,
            embedding_std,
            use_bias,
            cross,
            optimizer,
            learning_rate
        )
    }

    pub fn apply(&self, spec: &mut ModelSpec) {
        let arch = spec.architecture;
        if let Some(k) = self.k {
            spec.k = k;
        }
        if let Some(h) = &self.hidden_sizes {
            spec.mlp.hidden_sizes = h.clone();
        }
        if let Some(a) = self.activation {
            spec.mlp.activation = a;
        }
        if let Some(p) = self.dropout_keep {
            spec.mlp.dropout_keep = p;
        }
        if let Some(b) = self.dropout_on_embedding {
            spec.mlp.dropout_on_embedding = b;
        }
        if let Some(b) = self.literal_sigmoid_head {
            spec.mlp.literal_sigmoid_head = b;
        }
        // settings that only make sense for some architectures are ignored
        // elsewhere, so one [defaults] table can serve all nine models
        if let (Some(p), true) = (self.product_kind, arch.is_pnn()) {
            spec.product_kind = Some(p);
        }
        if let (Some(e), Architecture::Fnn) = (self.pretrain_epochs, arch) {
            spec.pretrain_epochs = e;
        }
        if let Some(std) = self.embedding_std {
            spec.embedding_init = InitScheme::Normal { std };
        }
        if let Some(b) = self.use_bias {
            spec.use_bias = b;
        }
        if let (Some(c), true) = (&self.cross, arch.has_linear()) {
            spec.cross = Some(c.clone());
        }
        if let Some(o) = self.optimizer {
            spec.optimizer = o;
        }
        if let Some(lr) = self.learning_rate {
            match &mut spec.optimizer {
                OptimizerConfig::Adam(c) => c.lr = lr,
                OptimizerConfig::Ftrl(c) => c.alpha = lr,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Planted,
    Linear,
}

impl SyntheticKind {
    pub fn spec(self) -> SyntheticSpec {
        match self {
            SyntheticKind::Planted => SyntheticSpec::planted_default(),
            SyntheticKind::Linear => SyntheticSpec::linear_only(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub kind: SyntheticKind,
    pub n_train: usize,
    pub n_test: usize,
    /// Replaces the built-in generator settings when present.
    pub spec: Option<SyntheticSpec>,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Planted,
            n_train: 200_000,
            n_test: 20_000,
            spec: None,
        }
    }
}

impl SyntheticSource {
    pub fn resolved_spec(&self) -> SyntheticSpec {
        self.spec.clone().unwrap_or_else(|| self.kind.spec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    /// Without a test file the train file is split.
    pub test: Option<PathBuf>,
    pub format: DataFormat,
    /// Field count for the text format; inferred from the file when absent.
    pub num_fields: Option<usize>,
    /// Text-format fields holding numbers rather than tokens.
    pub continuous_fields: Vec<usize>,
    pub split: f64,
    /// Read at most this many records from the train file.
    pub max_rows: Option<usize>,
    pub malformed: MalformedPolicy,
    /// Use this vocabulary instead of building one from the training data.
    pub vocab: Option<PathBuf>,
    pub synthetic: Option<SyntheticSource>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            format: DataFormat::Text,
            num_fields: None,
            continuous_fields: Vec::new(),
            split: 0.9,
            max_rows: None,
            malformed: MalformedPolicy::Abort,
            vocab: None,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub model: Architecture,
    pub axis: Option<SweepAxis>,
    /// Hidden-layer count held fixed on the shape axis.
    pub layers: usize,
    /// Neuron budget held fixed on the shape axis.
    pub total_neurons: usize,
    /// Restrict the shape axis to these shapes.
    pub shapes: Option<Vec<ShapeKind>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            model: Architecture::DeepFm,
            axis: None,
            layers: 3,
            total_neurons: 600,
            shapes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub out_dir: PathBuf,
    /// Stop when test logloss fails to improve for two epochs.
    pub early_stopping: bool,
    /// Models run by `compare` and `benchmark`; all nine when empty.
    pub models: Vec<Architecture>,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    /// Applied to every model before its own section.
    pub defaults: ModelOverrides,
    /// Per-model sections keyed by slug, e.g. `[model.deepfm]`.
    #[serde(rename = "model")]
    pub model_overrides: BTreeMap<String, ModelOverrides>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2017,
            epochs: 5,
            batch_size: 1024,
            out_dir: PathBuf::from("runs"),
            early_stopping: false,
            models: Vec::new(),
            data: DataConfig::default(),
            vocab: VocabConfig::default(),
            defaults: ModelOverrides::default(),
            model_overrides: BTreeMap::new(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::at_path(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn models(&self) -> Vec<Architecture> {
        if self.models.is_empty() {
            Architecture::ALL.to_vec()
        } else {
            self.models.clone()
        }
    }

    /// Defaults, then `[defaults]`, then the model's own section.
    pub fn model_spec(&self, arch: Architecture) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(arch);
        let own = self
            .model_overrides
            .iter()
            .find(|(key, _)| key.parse::<Architecture>().ok() == Some(arch))
            .map(|(_, o)| o.clone())
            .unwrap_or_default();
        self.defaults.merged(&own).apply(&mut spec);
        spec.validate()?;
        Ok(spec)
    }

    /// Every check that can fail before any data is read or model built.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        let d = &self.data;
        match (&d.train, &d.synthetic) {
            (None, None) => problems.push("set data.train or a [data.synthetic] source".into()),
            (Some(_), Some(_)) => problems.push("data.train and [data.synthetic] are exclusive".into()),
            _ => {}
        }
        for p in [&d.train, &d.test, &d.vocab].into_iter().flatten() {
            if !p.is_file() {
                problems.push(format!("{} does not exist or is not a file", p.display()));
            }
        }
        if d.test.is_none() && d.synthetic.is_none() && !(d.split > 0.0 && d.split < 1.0) {
            problems.push(format!("split must lie in (0, 1), got {}", d.split));
        }
        if let Some(s) = &d.synthetic {
            if s.n_train == 0 || s.n_test == 0 {
                problems.push("synthetic n_train and n_test must be positive".into());
            }
        }
        if self.vocab.min_count == 0 {
            problems.push("vocab.min_count must be at least 1".into());
        }
        for key in self.model_overrides.keys() {
            if key.parse::<Architecture>().is_err() {
                problems.push(format!("[model.{key}] names no known architecture"));
            }
        }
        for arch in self.models().into_iter().chain([self.sweep.model]) {
            if let Err(e) = self.model_spec(arch) {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}
