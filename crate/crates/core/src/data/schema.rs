use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Continuous,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Categorical => "categorical",
            FieldKind::Continuous => "continuous",
        }
    }
}

/// One attribute slot of a raw record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub field_id: usize,
    pub kind: FieldKind,
    pub name: String,
}

/// The ordered list of fields; ids are exactly `0..m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    fields: Vec<FieldSchema>,
}

impl Schema {
    pub fn new(fields: Vec<FieldSchema>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::config("schema needs at least one field"));
        }
        for (i, f) in fields.iter().enumerate() {
            if f.field_id != i {
                return Err(Error::config(format!(
                    "field ids must be contiguous from 0; position {i} holds id {}",
                    f.field_id
                )));
            }
            if f.name.is_empty() || f.name.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("field {i} has an invalid name `{}`", f.name)));
            }
        }
        Ok(Self { fields })
    }

    /// `m` fields named `f0, f1, ...`; the listed ids are continuous.
    pub fn with_continuous(m: usize, continuous: &[usize]) -> Result<Self> {
        if let Some(&bad) = continuous.iter().find(|&&c| c >= m) {
            return Err(Error::config(format!("continuous field {bad} outside 0..{m}")));
        }
        Self::new(
            (0..m)
                .map(|i| FieldSchema {
                    field_id: i,
                    kind: if continuous.contains(&i) {
                        FieldKind::Continuous
                    } else {
                        FieldKind::Categorical
                    },
                    name: format!("f{i}"),
                })
                .collect(),
        )
    }

    /// Criteo display-ads layout: 13 integer columns `I1..I13` followed by 26
    /// hashed categorical columns `C1..C26`.
    pub fn criteo() -> Self {
        let fields = (0..CRITEO_CONTINUOUS)
            .map(|i| (FieldKind::Continuous, format!("I{}", i + 1)))
            .chain((0..CRITEO_CATEGORICAL).map(|i| (FieldKind::Categorical, format!("C{}", i + 1))))
            .enumerate()
            .map(|(field_id, (kind, name))| FieldSchema { field_id, kind, name })
            .collect();
        Self { fields }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    pub fn field(&self, id: usize) -> &FieldSchema {
        &self.fields[id]
    }

    pub fn count(&self, kind: FieldKind) -> usize {
        self.fields.iter().filter(|f| f.kind == kind).count()
    }
}

pub const CRITEO_CONTINUOUS: usize = 13;
pub const CRITEO_CATEGORICAL: usize = 26;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn criteo_has_39_fields() {
        let s = Schema::criteo();
        assert_eq!(s.len(), 39);
        assert_eq!(s.count(FieldKind::Continuous), 13);
        assert_eq!(s.count(FieldKind::Categorical), 26);
        assert_eq!(s.field(0).name, "I1");
        assert_eq!(s.field(13).name, "C1");
    }

    #[test]
    fn rejects_gaps_and_duplicates() {
        let f = |id| FieldSchema {
            field_id: id,
            kind: FieldKind::Categorical,
            name: format!("x{id}"),
        };
        assert!(Schema::new(vec![f(0), f(2)]).is_err());
        assert!(Schema::new(vec![f(0), f(0)]).is_err());
        assert!(Schema::new(vec![]).is_err());
        assert!(Schema::new(vec![f(0), f(1)]).is_ok());
        assert!(Schema::with_continuous(3, &[3]).is_err());
    }
}
