//! Token vocabularies and the global one-hot feature space.
//!
//! Every field owns a contiguous range of feature indices. Categorical
//! fields map each kept token to one index and reserve the last index of
//! their range for out-of-vocabulary tokens. Plain continuous fields own a
//! single index carrying the (transformed) value; discretized continuous
//! fields behave like categorical ones over their buckets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::format::RawRecord;
use super::schema::{FieldKind, FieldSchema, Schema};
use super::{Feature, SparseInstance};
use crate::error::{Error, Result};

pub const VOCAB_FORMAT_VERSION: u32 = 1;
const VOCAB_MAGIC: &str = "deepfm-vocab";

/// How raw continuous values become feature values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContinuousTransform {
    /// The value as-is.
    Identity,
    /// `ln(1 + x)` for `x >= 0`, identity for negative values.
    Log1p,
    /// Equal-frequency buckets, one-hot encoded.
    Discretize,
}

impl ContinuousTransform {
    pub fn name(self) -> &'static str {
        match self {
            ContinuousTransform::Identity => "identity",
            ContinuousTransform::Log1p => "log1p",
            ContinuousTransform::Discretize => "discretize",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            ContinuousTransform::Log1p if x >= 0.0 => x.ln_1p(),
            _ => x,
        }
    }
}

impl std::str::FromStr for ContinuousTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "log1p" | "log" => Ok(Self::Log1p),
            "discretize" => Ok(Self::Discretize),
            other => Err(Error::config(format!("unknown continuous transform `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    /// Tokens seen fewer times than this map to the field's OOV index.
    pub min_count: u64,
    pub transform: ContinuousTransform,
    /// Bucket count for [`ContinuousTransform::Discretize`].
    pub buckets: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_count: 10,
            transform: ContinuousTransform::Log1p,
            buckets: 32,
        }
    }
}

/// Field boundaries inside `[0, d)`: field `j` owns `offsets[j]..offsets[j+1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldLayout {
    offsets: Vec<usize>,
}

impl FieldLayout {
    /// Layout from per-field sizes.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::config("every field needs at least one feature index"));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        Ok(Self { offsets })
    }

    pub(crate) fn from_offsets(offsets: Vec<usize>) -> Result<Self> {
        if offsets.len() < 2 || offsets[0] != 0 || offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::BadFormat("field offsets must start at 0 and increase".into()));
        }
        Ok(Self { offsets })
    }

    /// Number of fields `m`.
    pub fn num_fields(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Feature-space dimension `d`.
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn range(&self, field: usize) -> std::ops::Range<usize> {
        self.offsets[field]..self.offsets[field + 1]
    }

    /// The field owning feature `index`, or `None` outside `[0, d)`.
    #[inline]
    pub fn field_of(&self, index: usize) -> Option<usize> {
        if index >= self.dim() {
            return None;
        }
        Some(self.offsets.partition_point(|&o| o <= index) - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldEncoding {
    Categorical {
        /// token → local index within the field range
        tokens: HashMap<String, usize>,
    },
    Continuous { transform: ContinuousTransform },
    /// Upper-exclusive bucket boundaries, ascending.
    Discretized { boundaries: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldVocab {
    pub schema: FieldSchema,
    pub encoding: FieldEncoding,
}

impl FieldVocab {
    fn size(&self) -> usize {
        match &self.encoding {
            FieldEncoding::Categorical { tokens } => tokens.len() + 1,
            FieldEncoding::Continuous { .. } => 1,
            FieldEncoding::Discretized { boundaries } => boundaries.len() + 2,
        }
    }

    /// Local index reserved for unseen or missing values.
    fn oov_local(&self) -> usize {
        self.size() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    fields: Vec<FieldVocab>,
    layout: FieldLayout,
    config: VocabConfig,
}

impl Vocabulary {
    pub fn new(fields: Vec<FieldVocab>, config: VocabConfig) -> Result<Self> {
        let sizes: Vec<usize> = fields.iter().map(FieldVocab::size).collect();
        let layout = FieldLayout::from_sizes(&sizes)?;
        Ok(Self { fields, layout, config })
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    pub fn fields(&self) -> &[FieldVocab] {
        &self.fields
    }

    pub fn schema(&self) -> Schema {
        Schema::new(self.fields.iter().map(|f| f.schema.clone()).collect())
            .expect("vocabulary fields form a valid schema")
    }

    /// Global OOV index of a categorical or discretized field.
    pub fn oov_index(&self, field: usize) -> Option<usize> {
        let f = &self.fields[field];
        match f.encoding {
            FieldEncoding::Continuous { .. } => None,
            _ => Some(self.layout.offsets()[field] + f.oov_local()),
        }
    }

    /// The raw token behind a categorical feature index.
    pub fn token_of(&self, index: usize) -> Option<&str> {
        let field = self.layout.field_of(index)?;
        let local = index - self.layout.offsets()[field];
        match &self.fields[field].encoding {
            FieldEncoding::Categorical { tokens } => {
                tokens.iter().find(|(_, &l)| l == local).map(|(t, _)| t.as_str())
            }
            _ => None,
        }
    }

    /// Encode one raw record. Unseen and missing categorical tokens map to the
    /// field's OOV index; a missing plain continuous value produces no entry.
    pub fn encode(&self, row: &RawRecord) -> Result<SparseInstance> {
        if row.tokens.len() != self.num_fields() {
            return Err(Error::MalformedRecord {
                line: row.line,
                reason: format!("expected {} fields, found {}", self.num_fields(), row.tokens.len()),
            });
        }
        let mut entries = Vec::with_capacity(row.tokens.len());
        for (field, (fv, token)) in self.fields.iter().zip(&row.tokens).enumerate() {
            let offset = self.layout.offsets()[field];
            match &fv.encoding {
                FieldEncoding::Categorical { tokens } => {
                    let local = token
                        .as_deref()
                        .and_then(|t| tokens.get(t).copied())
                        .unwrap_or_else(|| fv.oov_local());
                    entries.push(Feature::one_hot(offset + local));
                }
                FieldEncoding::Continuous { transform } => {
                    if let Some(t) = token {
                        let x = parse_continuous(t, row.line, &fv.schema.name)?;
                        entries.push(Feature {
                            index: offset,
                            value: transform.apply(x),
                        });
                    }
                }
                FieldEncoding::Discretized { boundaries } => {
                    let local = match token {
                        Some(t) => {
                            let x = parse_continuous(t, row.line, &fv.schema.name)?;
                            boundaries.partition_point(|&b| b <= x)
                        }
                        None => fv.oov_local(),
                    };
                    entries.push(Feature::one_hot(offset + local));
                }
            }
        }
        Ok(SparseInstance::new(entries, row.label))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{VOCAB_MAGIC} = {VOCAB_FORMAT_VERSION}");
        let _ = writeln!(out, "m = {}", self.num_fields());
        let _ = writeln!(out, "d = {}", self.dim());
        let _ = writeln!(out, "transform = {}", self.config.transform.name());
        let _ = writeln!(out, "min_count = {}", self.config.min_count);
        let _ = writeln!(out, "buckets = {}", self.config.buckets);
        for (i, fv) in self.fields.iter().enumerate() {
            let (enc, extra) = match &fv.encoding {
                FieldEncoding::Categorical { .. } => ("categorical", String::new()),
                FieldEncoding::Continuous { transform } => ("continuous", format!(" transform={}", transform.name())),
                FieldEncoding::Discretized { .. } => ("discretized", String::new()),
            };
            let _ = writeln!(
                out,
                "field.{i} = {enc} offset={} size={} name={}{extra}",
                self.layout.offsets()[i],
                fv.size(),
                fv.schema.name
            );
            match &fv.encoding {
                FieldEncoding::Categorical { tokens } => {
                    let mut sorted: Vec<(&String, &usize)> = tokens.iter().collect();
                    sorted.sort_by_key(|(_, &l)| l);
                    for (t, l) in sorted {
                        let _ = writeln!(out, "token.{i} = {l} {t}");
                    }
                }
                FieldEncoding::Discretized { boundaries } => {
                    let joined: Vec<String> = boundaries.iter().map(|b| format!("{b:?}")).collect();
                    let _ = writeln!(out, "bounds.{i} = {}", joined.join(" "));
                }
                FieldEncoding::Continuous { .. } => {}
            }
        }
        out
    }

    /// SHA-256 of the serialized form; identifies the feature space a model
    /// was trained on.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::at_path(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::at_path(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::at_path(path, e))?;
        Self::from_reader(BufReader::new(f))
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::BadFormat(format!("vocabulary line {line}: {msg}"));
        let mut header: HashMap<String, String> = HashMap::new();
        let mut fields: Vec<(FieldSchema, String, usize, Option<ContinuousTransform>)> = Vec::new();
        let mut tokens: HashMap<usize, HashMap<String, usize>> = HashMap::new();
        let mut bounds: HashMap<usize, Vec<f64>> = HashMap::new();

        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line.split_once(" = ").ok_or_else(|| bad(lineno, "expected `key = value`"))?;
            if n == 0 {
                if key != VOCAB_MAGIC {
                    return Err(bad(lineno, "not a vocabulary file"));
                }
                let version: u32 = value.parse().map_err(|_| bad(lineno, "bad version"))?;
                if version != VOCAB_FORMAT_VERSION {
                    return Err(Error::UnsupportedVersion {
                        found: version,
                        supported: VOCAB_FORMAT_VERSION,
                    });
                }
                continue;
            }
            if let Some(idx) = key.strip_prefix("field.") {
                let id: usize = idx.parse().map_err(|_| bad(lineno, "bad field id"))?;
                let mut parts = value.split(' ');
                let enc = parts.next().unwrap_or_default().to_string();
                let mut size = None;
                let mut name = None;
                let mut transform = None;
                for p in parts {
                    match p.split_once('=') {
                        Some(("size", v)) => size = v.parse().ok(),
                        Some(("name", v)) => name = Some(v.to_string()),
                        Some(("transform", v)) => transform = Some(v.parse()?),
                        Some(("offset", _)) => {}
                        _ => return Err(bad(lineno, "unknown field attribute")),
                    }
                }
                let kind = match enc.as_str() {
                    "categorical" => FieldKind::Categorical,
                    "continuous" | "discretized" => FieldKind::Continuous,
                    _ => return Err(bad(lineno, "unknown field encoding")),
                };
                fields.push((
                    FieldSchema {
                        field_id: id,
                        kind,
                        name: name.ok_or_else(|| bad(lineno, "missing name"))?,
                    },
                    enc,
                    size.ok_or_else(|| bad(lineno, "missing size"))?,
                    transform,
                ));
            } else if let Some(idx) = key.strip_prefix("token.") {
                let id: usize = idx.parse().map_err(|_| bad(lineno, "bad field id"))?;
                let (local, token) = value.split_once(' ').ok_or_else(|| bad(lineno, "bad token entry"))?;
                let local: usize = local.parse().map_err(|_| bad(lineno, "bad token index"))?;
                tokens.entry(id).or_default().insert(token.to_string(), local);
            } else if let Some(idx) = key.strip_prefix("bounds.") {
                let id: usize = idx.parse().map_err(|_| bad(lineno, "bad field id"))?;
                let b = value
                    .split(' ')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>().map_err(|_| bad(lineno, "bad boundary")))
                    .collect::<Result<Vec<_>>>()?;
                bounds.insert(id, b);
            } else {
                header.insert(key.to_string(), value.to_string());
            }
        }

        if header.is_empty() && fields.is_empty() {
            return Err(Error::Truncated);
        }
        let get = |k: &str| header.get(k).ok_or_else(|| Error::BadFormat(format!("vocabulary header lacks `{k}`")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::BadFormat(format!("bad `{k}`"))) };
        let config = VocabConfig {
            min_count: num("min_count")?,
            transform: get("transform")?.parse()?,
            buckets: num("buckets")? as usize,
        };
        let m = num("m")? as usize;
        let d = num("d")? as usize;

        let mut vocab_fields = Vec::with_capacity(fields.len());
        for (i, (schema, enc, size, transform)) in fields.into_iter().enumerate() {
            if schema.field_id != i {
                return Err(Error::BadFormat("field entries out of order".into()));
            }
            let encoding = match enc.as_str() {
                "categorical" => FieldEncoding::Categorical {
                    tokens: tokens.remove(&i).unwrap_or_default(),
                },
                "discretized" => FieldEncoding::Discretized {
                    boundaries: bounds.remove(&i).unwrap_or_default(),
                },
                _ => FieldEncoding::Continuous {
                    transform: transform.unwrap_or(config.transform),
                },
            };
            let fv = FieldVocab { schema, encoding };
            if fv.size() != size {
                return Err(Error::BadFormat(format!("field {i} declares size {size} but holds {}", fv.size())));
            }
            vocab_fields.push(fv);
        }
        let vocab = Vocabulary::new(vocab_fields, config)?;
        if vocab.num_fields() != m || vocab.dim() != d {
            return Err(Error::BadFormat(format!(
                "header says m={m} d={d}, entries give m={} d={}",
                vocab.num_fields(),
                vocab.dim()
            )));
        }
        Ok(vocab)
    }
}

fn parse_continuous(token: &str, line: usize, field: &str) -> Result<f64> {
    match token.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::MalformedRecord {
            line,
            reason: format!("field {field}: `{token}` is not a finite number"),
        }),
    }
}

/// Count tokens and collect continuous values over `records`, then assign
/// feature indices.
///
/// Categorical tokens that reach `config.min_count` get an index each (in
/// lexicographic order); every categorical field also gets one OOV index.
pub fn build_vocabulary<I>(records: I, schema: &Schema, config: VocabConfig) -> Result<Vocabulary>
where
    I: IntoIterator<Item = Result<RawRecord>>,
{
    if config.transform == ContinuousTransform::Discretize && config.buckets < 1 {
        return Err(Error::config("discretization needs at least one bucket"));
    }
    let m = schema.len();
    let mut counts: Vec<HashMap<String, u64>> = vec![HashMap::new(); m];
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); m];
    let discretize = config.transform == ContinuousTransform::Discretize;
    let mut rows = 0usize;

    for (n, record) in records.into_iter().enumerate() {
        let record = record?;
        rows += 1;
        if record.tokens.len() != m {
            let line = if record.line == 0 { n + 1 } else { record.line };
            return Err(Error::MalformedRecord {
                line,
                reason: format!("expected {m} fields, found {}", record.tokens.len()),
            });
        }
        for (field, token) in record.tokens.iter().enumerate() {
            let Some(token) = token else { continue };
            match schema.field(field).kind {
                FieldKind::Categorical => {
                    if let Some(c) = counts[field].get_mut(token.as_str()) {
                        *c += 1;
                    } else {
                        counts[field].insert(token.clone(), 1);
                    }
                }
                FieldKind::Continuous => {
                    let x = parse_continuous(token, record.line.max(n + 1), &schema.field(field).name)?;
                    if discretize {
                        values[field].push(x);
                    }
                }
            }
        }
    }
    if rows == 0 {
        return Err(Error::EmptyInput("vocabulary needs at least one record"));
    }

    let fields = schema
        .fields()
        .iter()
        .zip(counts)
        .zip(values)
        .map(|((fs, counts), mut values)| {
            let encoding = match fs.kind {
                FieldKind::Categorical => {
                    let mut kept: Vec<String> = counts
                        .into_iter()
                        .filter(|&(_, c)| c >= config.min_count)
                        .map(|(t, _)| t)
                        .collect();
                    kept.sort_unstable();
                    FieldEncoding::Categorical {
                        tokens: kept.into_iter().enumerate().map(|(i, t)| (t, i)).collect(),
                    }
                }
                FieldKind::Continuous if discretize => FieldEncoding::Discretized {
                    boundaries: quantile_boundaries(&mut values, config.buckets),
                },
                FieldKind::Continuous => FieldEncoding::Continuous {
                    transform: config.transform,
                },
            };
            FieldVocab {
                schema: fs.clone(),
                encoding,
            }
        })
        .collect();
    Vocabulary::new(fields, config)
}

/// Distinct boundaries splitting `values` into at most `buckets` groups of
/// roughly equal size.
fn quantile_boundaries(values: &mut [f64], buckets: usize) -> Vec<f64> {
    if values.is_empty() || buckets <= 1 {
        return Vec::new();
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mut out: Vec<f64> = Vec::with_capacity(buckets - 1);
    for q in 1..buckets {
        let b = values[(q * n / buckets).min(n - 1)];
        // the smallest value would leave the first bucket empty
        if b > values[0] && out.last().is_none_or(|&last| b > last) {
            out.push(b);
        }
    }
    out
}

pub fn encode_instance(row: &RawRecord, vocab: &Vocabulary) -> Result<SparseInstance> {
    vocab.encode(row)
}
