//! The nine CTR architectures behind one prediction interface.
//!
//! | architecture | order-1 `⟨w,x⟩` | FM pairwise | deep tower | embedding |
//! |---|---|---|---|---|
//! | LR | yes | | | none |
//! | FM | yes | yes | | FM table |
//! | FNN | | | yes | own table, FM-pretrained |
//! | IPNN / OPNN / PNN* | | | product layer + tower | own table |
//! | LR&DNN | yes | | yes | own table |
//! | FM&DNN | yes | yes | yes | two tables |
//! | DeepFM | yes | yes | yes | one shared table |

mod io;
pub mod product;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FieldLayout, SparseInstance};
use crate::deep::{mlp_backward_accumulate, mlp_forward, MlpCache, MlpConfig, MlpGradients, MlpParameters, Mode};
use crate::embedding::{
    accumulate_embedding_grads, embed_instance, linear_backward, linear_term, EmbeddingTable, FieldEmbeddings, LinearWeights,
    SharedParameters, SparseGrad,
};
use crate::error::{Error, Result};
use crate::fm::{fm_backward, fm_forward, FmForwardCache, SharedGrads};
use crate::math::{mix64, sigmoid, Activation, InitScheme};
use crate::optim::{AdamConfig, FtrlConfig, GradBlock, OptimizerConfig};

pub use io::{load_checkpoint, load_model, save_model, MODEL_FORMAT_VERSION};
pub use product::{product_layer, product_layer_backward, product_output_len, ProductKind};
pub use train::{batch_gradients, fit, pretrain_fm_then_init, train_step, EpochStats, FitOptions, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Lr,
    Fm,
    Fnn,
    Ipnn,
    Opnn,
    PnnStar,
    LrDnn,
    FmDnn,
    #[serde(rename = "deepfm")]
    DeepFm,
}

impl Architecture {
    pub const ALL: [Architecture; 9] = [
        Architecture::Lr,
        Architecture::Fm,
        Architecture::Fnn,
        Architecture::Ipnn,
        Architecture::Opnn,
        Architecture::PnnStar,
        Architecture::LrDnn,
        Architecture::FmDnn,
        Architecture::DeepFm,
    ];

    /// Display name, e.g. `PNN*` or `FM&DNN`.
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Lr => "LR",
            Architecture::Fm => "FM",
            Architecture::Fnn => "FNN",
            Architecture::Ipnn => "IPNN",
            Architecture::Opnn => "OPNN",
            Architecture::PnnStar => "PNN*",
            Architecture::LrDnn => "LR&DNN",
            Architecture::FmDnn => "FM&DNN",
            Architecture::DeepFm => "DeepFM",
        }
    }

    /// Identifier safe for file names and config sections.
    pub fn slug(self) -> &'static str {
        match self {
            Architecture::Lr => "lr",
            Architecture::Fm => "fm",
            Architecture::Fnn => "fnn",
            Architecture::Ipnn => "ipnn",
            Architecture::Opnn => "opnn",
            Architecture::PnnStar => "pnn_star",
            Architecture::LrDnn => "lr_dnn",
            Architecture::FmDnn => "fm_dnn",
            Architecture::DeepFm => "deepfm",
        }
    }

    pub fn has_linear(self) -> bool {
        matches!(self, Architecture::Lr | Architecture::LrDnn)
    }

    pub fn has_fm(self) -> bool {
        matches!(self, Architecture::Fm | Architecture::FmDnn | Architecture::DeepFm)
    }

    pub fn has_deep(self) -> bool {
        !matches!(self, Architecture::Lr | Architecture::Fm)
    }

    /// Deep models with their own embedding table.
    pub fn has_own_deep_table(self) -> bool {
        self.has_deep() && self != Architecture::DeepFm
    }

    pub fn default_product(self) -> Option<ProductKind> {
        match self {
            Architecture::Ipnn => Some(ProductKind::Inner),
            Architecture::Opnn => Some(ProductKind::Outer),
            Architecture::PnnStar => Some(ProductKind::Both),
            _ => None,
        }
    }

    pub fn is_pnn(self) -> bool {
        self.default_product().is_some()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Architecture::ALL
            .into_iter()
            .find(|a| a.slug() == t || a.name().to_ascii_lowercase() == t)
            .ok_or_else(|| Error::config(format!("unknown architecture {s:?}")))
    }
}

/// Hashed cross-product features for the wide part of LR and LR&DNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossConfig {
    pub pairs: Vec<[usize; 2]>,
    pub buckets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub k: usize,
    pub mlp: MlpConfig,
    pub share_embedding: bool,
    pub product_kind: Option<ProductKind>,
    pub pretrain_epochs: usize,
    pub embedding_init: InitScheme,
    pub use_bias: bool,
    pub cross: Option<CrossConfig>,
    pub optimizer: OptimizerConfig,
}

impl ModelSpec {
    /// Defaults: k = 10, 400-400-400 relu tower (tanh for IPNN) with keep
    /// probability 0.5, N(0, 0.01) embeddings, FTRL for LR and Adam otherwise.
    pub fn new(architecture: Architecture) -> Self {
        let mut mlp = MlpConfig::default();
        if architecture == Architecture::Ipnn {
            mlp.activation = Activation::Tanh;
        }
        Self {
            architecture,
            k: 10,
            mlp,
            share_embedding: architecture == Architecture::DeepFm,
            product_kind: architecture.default_product(),
            pretrain_epochs: usize::from(architecture == Architecture::Fnn),
            embedding_init: InitScheme::Normal { std: 0.01 },
            use_bias: true,
            cross: None,
            optimizer: if architecture == Architecture::Lr {
                OptimizerConfig::Ftrl(FtrlConfig::default())
            } else {
                OptimizerConfig::Adam(AdamConfig::default())
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture;
        let bad = |msg: String| Err(Error::config(format!("{arch}: {msg}")));
        if arch != Architecture::Lr && self.k == 0 {
            return bad("embedding size k must be positive".into());
        }
        if arch.has_deep() {
            self.mlp.validate()?;
        }
        if self.share_embedding != (arch == Architecture::DeepFm) {
            return bad("only DeepFM shares its embedding between the wide and deep parts".into());
        }
        if arch.is_pnn() != self.product_kind.is_some() {
            return bad("product_kind is required for PNN variants and forbidden otherwise".into());
        }
        if self.pretrain_epochs > 0 && arch != Architecture::Fnn {
            return bad("FM pre-training applies to FNN only".into());
        }
        if let InitScheme::Normal { std } = self.embedding_init {
            if !(std.is_finite() && std >= 0.0) {
                return bad(format!("invalid embedding std {std}"));
            }
        }
        if let Some(cross) = &self.cross {
            if !arch.has_linear() {
                return bad("cross-product features need an order-1 linear part".into());
            }
            if cross.buckets == 0 || cross.pairs.iter().any(|[a, b]| a == b) {
                return bad("cross features need buckets > 0 and two distinct fields per pair".into());
            }
        }
        self.optimizer.validate()
    }

    /// Width of the deep tower's input for `m` fields.
    pub fn deep_input_dim(&self, m: usize) -> usize {
        match self.product_kind {
            Some(kind) => product_output_len(m, self.k, kind),
            None => m * self.k,
        }
    }
}

/// What training produced besides the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingMeta {
    pub epochs: u64,
    pub seed: u64,
    pub steps: u64,
    pub final_auc: Option<f64>,
    pub final_logloss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layout: FieldLayout,
    wide: Option<LinearWeights>,
    cross: Option<Vec<f64>>,
    fm: Option<SharedParameters>,
    deep_table: Option<EmbeddingTable>,
    mlp: Option<MlpParameters>,
    vocab_hash: Option<[u8; 32]>,
    pub meta: TrainingMeta,
}

/// Seeded RNG stream for one parameter group, so adding a group never shifts
/// the initialization of another.
fn init_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    /// Random initialization: zero linear weights, embeddings from
    /// `spec.embedding_init`, Glorot tower weights.
    pub fn new(spec: ModelSpec, layout: &FieldLayout, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(spec, layout)?;
        let k = model.spec.k;
        let d = layout.dim();
        if let Some(fm) = &mut model.fm {
            fm.table = EmbeddingTable::random(d, k, model.spec.embedding_init, &mut init_stream(seed, 1))?;
        }
        if let Some(t) = &mut model.deep_table {
            *t = EmbeddingTable::random(d, k, model.spec.embedding_init, &mut init_stream(seed, 2))?;
        }
        if let Some(mlp) = &mut model.mlp {
            *mlp = MlpParameters::random(mlp.input_dim(), &model.spec.mlp, &mut init_stream(seed, 3))?;
        }
        model.meta.seed = seed;
        Ok(model)
    }

    /// Every parameter zero.
    pub fn zeros(spec: ModelSpec, layout: &FieldLayout) -> Result<Self> {
        spec.validate()?;
        let arch = spec.architecture;
        let (m, d, k) = (layout.num_fields(), layout.dim(), spec.k);
        if arch.is_pnn() && m < 2 {
            return Err(Error::config(format!("{arch} needs at least 2 fields, got {m}")));
        }
        if let Some(cross) = &spec.cross {
            if let Some([a, b]) = cross.pairs.iter().find(|[a, b]| *a >= m || *b >= m) {
                return Err(Error::config(format!("cross pair ({a}, {b}) names a field outside 0..{m}")));
            }
        }
        let wide = arch.has_linear().then(|| LinearWeights::zeros(d, spec.use_bias));
        let cross = spec.cross.as_ref().map(|c| vec![0.0; c.buckets]);
        let fm = if arch.has_fm() {
            Some(SharedParameters::new(LinearWeights::zeros(d, spec.use_bias), EmbeddingTable::zeros(d, k)?)?)
        } else {
            None
        };
        let deep_table = if arch.has_own_deep_table() { Some(EmbeddingTable::zeros(d, k)?) } else { None };
        let mlp = if arch.has_deep() { Some(MlpParameters::zeros(spec.deep_input_dim(m), &spec.mlp)?) } else { None };
        Ok(Self {
            spec,
            layout: layout.clone(),
            wide,
            cross,
            fm,
            deep_table,
            mlp,
            vocab_hash: None,
            meta: TrainingMeta::default(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn architecture(&self) -> Architecture {
        self.spec.architecture
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn vocab_hash(&self) -> Option<&[u8; 32]> {
        self.vocab_hash.as_ref()
    }

    pub fn set_vocab_hash(&mut self, hash: Option<[u8; 32]>) {
        self.vocab_hash = hash;
    }

    pub fn wide(&self) -> Option<&LinearWeights> {
        self.wide.as_ref()
    }

    pub fn wide_mut(&mut self) -> Option<&mut LinearWeights> {
        self.wide.as_mut()
    }

    pub fn fm(&self) -> Option<&SharedParameters> {
        self.fm.as_ref()
    }

    pub fn fm_mut(&mut self) -> Option<&mut SharedParameters> {
        self.fm.as_mut()
    }

    /// The deep part's own table (`None` for DeepFM, which reads the FM table).
    pub fn deep_table(&self) -> Option<&EmbeddingTable> {
        self.deep_table.as_ref()
    }

    pub fn deep_table_mut(&mut self) -> Option<&mut EmbeddingTable> {
        self.deep_table.as_mut()
    }

    /// Whichever table feeds the deep tower.
    pub fn deep_embedding(&self) -> Option<&EmbeddingTable> {
        if !self.spec.architecture.has_deep() {
            return None;
        }
        self.deep_table.as_ref().or(self.fm.as_ref().map(|f| &f.table))
    }

    pub fn mlp(&self) -> Option<&MlpParameters> {
        self.mlp.as_ref()
    }

    pub fn mlp_mut(&mut self) -> Option<&mut MlpParameters> {
        self.mlp.as_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Parameter blocks in a fixed order shared with [`ModelGrads::blocks`].
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        if let Some(w) = &self.wide {
            out.push(("wide.w".into(), &w.w));
            out.push(("wide.bias".into(), std::slice::from_ref(&w.bias)));
        }
        if let Some(c) = &self.cross {
            out.push(("cross.w".into(), c));
        }
        if let Some(fm) = &self.fm {
            out.push(("fm.w".into(), &fm.linear.w));
            out.push(("fm.bias".into(), std::slice::from_ref(&fm.linear.bias)));
            out.push(("fm.v".into(), fm.table.as_slice()));
        }
        if let Some(t) = &self.deep_table {
            out.push(("deep.v".into(), t.as_slice()));
        }
        if let Some(mlp) = &self.mlp {
            for (l, layer) in mlp.layers.iter().enumerate() {
                out.push((format!("mlp.{l}.weight"), layer.weight.as_slice()));
                out.push((format!("mlp.{l}.bias"), &layer.bias));
            }
            out.push(("mlp.head.weight".into(), &mlp.head_weight));
            out.push(("mlp.head.bias".into(), std::slice::from_ref(&mlp.head_bias)));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        if let Some(w) = &mut self.wide {
            out.push(("wide.w".into(), &mut w.w));
            out.push(("wide.bias".into(), std::slice::from_mut(&mut w.bias)));
        }
        if let Some(c) = &mut self.cross {
            out.push(("cross.w".into(), c));
        }
        if let Some(fm) = &mut self.fm {
            out.push(("fm.w".into(), &mut fm.linear.w));
            out.push(("fm.bias".into(), std::slice::from_mut(&mut fm.linear.bias)));
            out.push(("fm.v".into(), fm.table.as_mut_slice()));
        }
        if let Some(t) = &mut self.deep_table {
            out.push(("deep.v".into(), t.as_mut_slice()));
        }
        if let Some(mlp) = &mut self.mlp {
            for (l, layer) in mlp.layers.iter_mut().enumerate() {
                out.push((format!("mlp.{l}.weight"), layer.weight.as_mut_slice()));
                out.push((format!("mlp.{l}.bias"), &mut layer.bias));
            }
            out.push(("mlp.head.weight".into(), &mut mlp.head_weight));
            out.push(("mlp.head.bias".into(), std::slice::from_mut(&mut mlp.head_bias)));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// Hashed cross features `(bucket, x_a · x_b)` of one instance.
    fn cross_features(&self, x: &SparseInstance) -> Vec<(usize, f64)> {
        let Some(cfg) = &self.spec.cross else {
            return Vec::new();
        };
        let find = |field: usize| x.entries().iter().find(|e| self.layout.range(field).contains(&e.index));
        cfg.pairs
            .iter()
            .filter_map(|&[a, b]| {
                let (ea, eb) = (find(a)?, find(b)?);
                let bucket = mix64(ea.index as u64, eb.index as u64) % cfg.buckets as u64;
                Some((bucket as usize, ea.value * eb.value))
            })
            .collect()
    }

    /// Full forward pass over one instance, returning the logit and caches.
    pub(crate) fn forward<R: Rng + ?Sized>(&self, x: &SparseInstance, mode: Mode, rng: &mut R) -> Result<Trace> {
        let mut logit = 0.0;
        if let Some(w) = &self.wide {
            logit += linear_term(x, w)?;
        }
        let cross = self.cross_features(x);
        if let Some(c) = &self.cross {
            logit += cross.iter().map(|&(b, v)| c[b] * v).sum::<f64>();
        }
        let fm = match &self.fm {
            Some(p) => {
                let (y, cache) = fm_forward(x, p)?;
                logit += y;
                Some(cache)
            }
            None => None,
        };
        let (emb, mlp) = match (&self.mlp, self.deep_embedding()) {
            (Some(params), Some(table)) => {
                let e = embed_instance(x, table, &self.layout)?;
                let (y, cache) = match self.spec.product_kind {
                    Some(kind) => mlp_forward(&product_layer(&e, kind)?, params, &self.spec.mlp, mode, rng)?,
                    None => mlp_forward(&e.values, params, &self.spec.mlp, mode, rng)?,
                };
                logit += y;
                (Some(e), Some(cache))
            }
            _ => (None, None),
        };
        Ok(Trace {
            logit,
            fm,
            emb,
            mlp,
            cross,
        })
    }

    /// Accumulate `upstream · ∂logit/∂θ` into `grads`.
    pub(crate) fn backward(&self, x: &SparseInstance, trace: &Trace, upstream: f64, grads: &mut ModelGrads) -> Result<()> {
        if upstream == 0.0 {
            return Ok(());
        }
        if let (Some(w), Some((gw, gb))) = (&self.wide, &mut grads.wide) {
            linear_backward(x, upstream, gw, gb, w.use_bias);
        }
        if let Some(gc) = &mut grads.cross {
            for &(b, v) in &trace.cross {
                gc.row_mut(b)[0] += upstream * v;
            }
        }
        if let (Some(p), Some(cache), Some(g)) = (&self.fm, &trace.fm, &mut grads.fm) {
            fm_backward(x, p, cache, upstream, g)?;
        }
        if let (Some(params), Some(cache), Some(e), Some(g)) = (&self.mlp, &trace.mlp, &trace.emb, &mut grads.mlp) {
            let g_in = mlp_backward_accumulate(cache, upstream, params, &self.spec.mlp, g)?;
            let g_emb = match self.spec.product_kind {
                Some(kind) => product_layer_backward(e, kind, &g_in)?,
                None => g_in,
            };
            let target = match &mut grads.deep_v {
                Some(own) => own,
                None => &mut grads.fm.as_mut().expect("DeepFM carries FM gradients").v,
            };
            accumulate_embedding_grads(x, &g_emb, target, &self.layout)?;
        }
        Ok(())
    }

    /// `ŷ`, strictly inside (0, 1).
    pub fn predict(&self, x: &SparseInstance) -> Result<f64> {
        Ok(probability(self.logit(x)?))
    }

    /// Eval-mode logit.
    pub fn logit(&self, x: &SparseInstance) -> Result<f64> {
        x.validate(&self.layout)?;
        // eval mode never draws from the RNG
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(x, Mode::Eval, &mut rng)?.logit)
    }

    pub fn predict_batch(&self, xs: &[SparseInstance]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        xs.par_iter().map(|x| self.predict(x)).collect()
    }
}

/// Sigmoid kept off the endpoints so saturated logits still give a
/// probability in the open interval.
pub fn probability(logit: f64) -> f64 {
    sigmoid(logit).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub(crate) struct Trace {
    pub logit: f64,
    fm: Option<FmForwardCache>,
    emb: Option<FieldEmbeddings>,
    mlp: Option<MlpCache>,
    cross: Vec<(usize, f64)>,
}

/// Gradients laid out like the model's parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub wide: Option<(SparseGrad, f64)>,
    pub cross: Option<SparseGrad>,
    pub fm: Option<SharedGrads>,
    pub deep_v: Option<SparseGrad>,
    pub mlp: Option<MlpGradients>,
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        Self {
            wide: model.wide.as_ref().map(|_| (SparseGrad::new(1), 0.0)),
            cross: model.cross.as_ref().map(|_| SparseGrad::new(1)),
            fm: model.fm.as_ref().map(|p| SharedGrads::new(p.k())),
            deep_v: model.deep_table.as_ref().map(|t| SparseGrad::new(t.k())),
            mlp: model.mlp.as_ref().map(MlpGradients::zeros_like),
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        if let (Some((w, b)), Some((ow, ob))) = (&mut self.wide, &other.wide) {
            w.merge(ow);
            *b += ob;
        }
        if let (Some(c), Some(oc)) = (&mut self.cross, &other.cross) {
            c.merge(oc);
        }
        if let (Some(f), Some(of)) = (&mut self.fm, &other.fm) {
            f.w.merge(&of.w);
            f.bias += of.bias;
            f.v.merge(&of.v);
        }
        if let (Some(v), Some(ov)) = (&mut self.deep_v, &other.deep_v) {
            v.merge(ov);
        }
        if let (Some(m), Some(om)) = (&mut self.mlp, &other.mlp) {
            m.add(om);
        }
    }

    pub fn scale(&mut self, s: f64) {
        if let Some((w, b)) = &mut self.wide {
            w.scale(s);
            *b *= s;
        }
        if let Some(c) = &mut self.cross {
            c.scale(s);
        }
        if let Some(f) = &mut self.fm {
            f.w.scale(s);
            f.bias *= s;
            f.v.scale(s);
        }
        if let Some(v) = &mut self.deep_v {
            v.scale(s);
        }
        if let Some(m) = &mut self.mlp {
            m.scale(s);
        }
    }

    /// One entry per [`Model::blocks`] entry, in the same order.
    pub fn blocks(&self) -> Vec<GradBlock<'_>> {
        let mut out = Vec::new();
        if let Some((w, b)) = &self.wide {
            out.push(GradBlock::Sparse(w));
            out.push(GradBlock::Dense(std::slice::from_ref(b)));
        }
        if let Some(c) = &self.cross {
            out.push(GradBlock::Sparse(c));
        }
        if let Some(f) = &self.fm {
            out.push(GradBlock::Sparse(&f.w));
            out.push(GradBlock::Dense(std::slice::from_ref(&f.bias)));
            out.push(GradBlock::Sparse(&f.v));
        }
        if let Some(v) = &self.deep_v {
            out.push(GradBlock::Sparse(v));
        }
        if let Some(m) = &self.mlp {
            for (gw, gb) in &m.layers {
                out.push(GradBlock::Dense(gw));
                out.push(GradBlock::Dense(gb));
            }
            out.push(GradBlock::Dense(&m.head_weight));
            out.push(GradBlock::Dense(std::slice::from_ref(&m.head_bias)));
        }
        out
    }
}

#[cfg(test)]
mod tests;
