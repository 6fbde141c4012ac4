//! First-order weights, latent vectors, sparse lookup and sparse gradients.
//!
//! The latent table `V` is stored row-major by feature index so that an
//! instance touches `m` contiguous rows of length `k`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::binio;
use crate::data::{FieldLayout, SparseInstance};
use crate::error::{Error, Result};
use crate::math::{fill_init, InitScheme};

/// Order-1 weights `w` plus an optional global bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    pub w: Vec<f64>,
    pub bias: f64,
    pub use_bias: bool,
}

impl LinearWeights {
    pub fn zeros(dim: usize, use_bias: bool) -> Self {
        Self {
            w: vec![0.0; dim],
            bias: 0.0,
            use_bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// `d × k` latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    k: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(dim: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("embedding size k must be at least 1"));
        }
        Ok(Self {
            dim,
            k,
            data: vec![0.0; dim * k],
        })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, k: usize, scheme: InitScheme, rng: &mut R) -> Result<Self> {
        let mut t = Self::zeros(dim, k)?;
        fill_init(&mut t.data, k, dim, scheme, rng);
        Ok(t)
    }

    pub fn from_vec(dim: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("embedding size k must be at least 1"));
        }
        if data.len() != dim * k {
            return Err(Error::DimensionMismatch {
                context: "embedding table",
                expected: dim * k,
                got: data.len(),
            });
        }
        Ok(Self { dim, k, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, index: usize) -> &[f64] {
        &self.data[index * self.k..(index + 1) * self.k]
    }

    pub fn row_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.k..(index + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// The parameter store shared by the FM and deep parts: `w`, `V`, bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedParameters {
    pub linear: LinearWeights,
    pub table: EmbeddingTable,
}

impl SharedParameters {
    pub fn new(linear: LinearWeights, table: EmbeddingTable) -> Result<Self> {
        if linear.dim() != table.dim() {
            return Err(Error::DimensionMismatch {
                context: "w and V row count",
                expected: table.dim(),
                got: linear.dim(),
            });
        }
        Ok(Self { linear, table })
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn k(&self) -> usize {
        self.table.k()
    }

    /// Binary layout, all little-endian:
    /// `"DFMP" | version u32 | d u64 | k u64 | flags u32 | bias f64 | w[d] f64 | V[d·k] f64`.
    /// Flag bit 0 marks an enabled bias.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        binio::put_u32(w, PARAMS_VERSION)?;
        binio::put_u64(w, self.dim() as u64)?;
        binio::put_u64(w, self.k() as u64)?;
        binio::put_u32(w, u32::from(self.linear.use_bias))?;
        binio::put_f64(w, self.linear.bias)?;
        binio::put_f64s(w, &self.linear.w)?;
        binio::put_f64s(w, self.table.as_slice())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(binio::eof_to_truncated)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::BadFormat("not a parameter file".into()));
        }
        let version = binio::get_u32(r)?;
        if version != PARAMS_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: PARAMS_VERSION,
            });
        }
        let d = binio::get_u64(r)?;
        let k = binio::get_u64(r)?;
        let flags = binio::get_u32(r)?;
        let bias = binio::get_f64(r)?;
        let w = binio::get_f64s(r, d, None)?;
        let v = binio::get_f64s(r, d.saturating_mul(k), None)?;
        let linear = LinearWeights {
            w,
            bias,
            use_bias: flags & 1 == 1,
        };
        SharedParameters::new(linear, EmbeddingTable::from_vec(d as usize, k as usize, v)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::at_path(path, e))?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::at_path(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"DFMP";
const PARAMS_VERSION: u32 = 1;

/// The per-field embeddings `e_1..e_m` of one instance, flattened into the
/// deep input `a⁽⁰⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEmbeddings {
    pub k: usize,
    /// `m·k` values; field `f` occupies `f·k..(f+1)·k`.
    pub values: Vec<f64>,
    /// Feature index behind each field, `None` when the field is absent.
    pub active: Vec<Option<usize>>,
}

impl FieldEmbeddings {
    pub fn num_fields(&self) -> usize {
        self.active.len()
    }

    pub fn field(&self, f: usize) -> &[f64] {
        &self.values[f * self.k..(f + 1) * self.k]
    }
}

/// `e_f = x_f · V[index_f]`; absent fields stay zero.
pub fn embed_instance(x: &SparseInstance, table: &EmbeddingTable, layout: &FieldLayout) -> Result<FieldEmbeddings> {
    let k = table.k();
    let m = layout.num_fields();
    let mut values = vec![0.0; m * k];
    let mut active = vec![None; m];
    for e in x.entries() {
        let field = checked_field(e.index, table.dim(), layout)?;
        active[field] = Some(e.index);
        for (out, v) in values[field * k..(field + 1) * k].iter_mut().zip(table.row(e.index)) {
            *out = e.value * v;
        }
    }
    Ok(FieldEmbeddings { k, values, active })
}

#[inline]
pub(crate) fn checked_field(index: usize, dim: usize, layout: &FieldLayout) -> Result<usize> {
    if index >= dim {
        return Err(Error::IndexOutOfRange { index, dim });
    }
    layout.field_of(index).ok_or(Error::IndexOutOfRange {
        index,
        dim: layout.dim(),
    })
}

/// Row-sparse gradient: only rows that received a contribution are stored.
/// Rows live in one flat buffer in first-touch order; iteration is by row
/// index.
#[derive(Debug, Clone, Default)]
pub struct SparseGrad {
    width: usize,
    slots: BTreeMap<usize, usize>,
    data: Vec<f64>,
}

impl PartialEq for SparseGrad {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width && self.rows().eq(other.rows())
    }
}

impl SparseGrad {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            slots: BTreeMap::new(),
            data: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row_mut(&mut self, index: usize) -> &mut [f64] {
        let w = self.width;
        let next = self.slots.len();
        let slot = *self.slots.entry(index).or_insert(next);
        if slot == next {
            self.data.resize(self.data.len() + w, 0.0);
        }
        &mut self.data[slot * w..(slot + 1) * w]
    }

    /// `row[index] += scale · v`.
    #[inline]
    pub fn add_scaled(&mut self, index: usize, scale: f64, v: &[f64]) {
        for (g, x) in self.row_mut(index).iter_mut().zip(v) {
            *g += scale * x;
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        let w = self.width;
        self.slots.iter().map(move |(&i, &s)| (i, &self.data[s * w..(s + 1) * w]))
    }

    pub fn touched(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.keys().copied()
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        let w = self.width;
        self.slots.get(&index).map(|&s| &self.data[s * w..(s + 1) * w])
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    /// Add every row of `other`.
    pub fn merge(&mut self, other: &SparseGrad) {
        for (i, r) in other.rows() {
            self.add_scaled(i, 1.0, r);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.data.clear();
    }
}

/// Push per-field upstream gradients back into the latent rows that produced
/// them: `grad[V[index_f]] += x_f · upstream_f`. Fields whose upstream slice
/// is all zero add nothing.
pub fn accumulate_embedding_grads(
    x: &SparseInstance,
    upstream: &[f64],
    grad: &mut SparseGrad,
    layout: &FieldLayout,
) -> Result<()> {
    let k = grad.width();
    let m = layout.num_fields();
    if upstream.len() != m * k {
        return Err(Error::DimensionMismatch {
            context: "embedding upstream",
            expected: m * k,
            got: upstream.len(),
        });
    }
    for e in x.entries() {
        let field = checked_field(e.index, layout.dim(), layout)?;
        let u = &upstream[field * k..(field + 1) * k];
        if u.iter().all(|&g| g == 0.0) {
            continue;
        }
        grad.add_scaled(e.index, e.value, u);
    }
    Ok(())
}

/// `⟨w, x⟩` plus the bias when enabled.
pub fn linear_term(x: &SparseInstance, lw: &LinearWeights) -> Result<f64> {
    let mut s = if lw.use_bias { lw.bias } else { 0.0 };
    for e in x.entries() {
        let w = lw.w.get(e.index).ok_or(Error::IndexOutOfRange {
            index: e.index,
            dim: lw.dim(),
        })?;
        s += w * e.value;
    }
    Ok(s)
}

/// Gradient of [`linear_term`] scaled by `upstream`.
pub(crate) fn linear_backward(x: &SparseInstance, upstream: f64, grad_w: &mut SparseGrad, grad_bias: &mut f64, use_bias: bool) {
    if upstream == 0.0 {
        return;
    }
    for e in x.entries() {
        grad_w.row_mut(e.index)[0] += upstream * e.value;
    }
    if use_bias {
        *grad_bias += upstream;
    }
}
