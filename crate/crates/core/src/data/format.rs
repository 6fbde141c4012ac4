//! Line-oriented record formats.
//!
//! * `text`: `<label> <field_id>:<token_or_value> ...`, space separated.
//!   Fields that do not appear on a line are missing.
//! * `criteo`: tab separated `label, I1..I13, C1..C26`; empty columns are
//!   missing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{CRITEO_CATEGORICAL, CRITEO_CONTINUOUS};
use super::vocab::Vocabulary;
use super::{Dataset, Provenance};
use crate::error::{Error, Result};

/// One unparsed record: a label and one optional token per field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    /// 1-based source line, 0 when not read from a file.
    pub line: usize,
    pub label: u8,
    pub tokens: Vec<Option<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Text,
    Criteo,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(DataFormat::Text),
            "criteo" => Ok(DataFormat::Criteo),
            other => Err(Error::config(format!("unknown data format `{other}`"))),
        }
    }
}

/// What to do with a line that fails to parse or encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MalformedPolicy {
    #[default]
    Abort,
    Skip,
}

fn malformed(line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedRecord {
        line,
        reason: reason.into(),
    }
}

fn parse_label(s: &str, line: usize) -> Result<u8> {
    match s {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(malformed(line, format!("label must be 0 or 1, got `{other}`"))),
    }
}

pub fn parse_text_line(line: &str, num_fields: usize, lineno: usize) -> Result<RawRecord> {
    let mut parts = line.split_ascii_whitespace();
    let label = parse_label(parts.next().ok_or_else(|| malformed(lineno, "empty line"))?, lineno)?;
    let mut tokens: Vec<Option<String>> = vec![None; num_fields];
    for part in parts {
        let (field, token) = part
            .split_once(':')
            .ok_or_else(|| malformed(lineno, format!("`{part}` is not field:token")))?;
        let field: usize = field
            .parse()
            .map_err(|_| malformed(lineno, format!("bad field id `{field}`")))?;
        if field >= num_fields {
            return Err(malformed(lineno, format!("field id {field} outside 0..{num_fields}")));
        }
        if token.is_empty() {
            return Err(malformed(lineno, format!("field {field} has an empty token")));
        }
        if tokens[field].replace(token.to_string()).is_some() {
            return Err(malformed(lineno, format!("field {field} appears twice")));
        }
    }
    Ok(RawRecord {
        line: lineno,
        label,
        tokens,
    })
}

pub fn parse_criteo_line(line: &str, lineno: usize) -> Result<RawRecord> {
    let cols: Vec<&str> = line.split('\t').collect();
    let expected = 1 + CRITEO_CONTINUOUS + CRITEO_CATEGORICAL;
    if cols.len() != expected {
        return Err(malformed(lineno, format!("expected {expected} tab-separated columns, found {}", cols.len())));
    }
    let label = parse_label(cols[0].trim(), lineno)?;
    let tokens = cols[1..]
        .iter()
        .map(|c| {
            let c = c.trim();
            (!c.is_empty()).then(|| c.to_string())
        })
        .collect();
    Ok(RawRecord {
        line: lineno,
        label,
        tokens,
    })
}

/// Streams [`RawRecord`]s from a file. Under [`MalformedPolicy::Skip`] bad
/// lines are logged, counted in `skipped`, and dropped.
pub struct RecordReader<R> {
    lines: Lines<R>,
    format: DataFormat,
    num_fields: usize,
    policy: MalformedPolicy,
    lineno: usize,
    pub skipped: usize,
}

impl RecordReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>, format: DataFormat, num_fields: usize, policy: MalformedPolicy) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::at_path(path, e))?;
        Ok(Self::new(BufReader::new(f), format, num_fields, policy))
    }
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(reader: R, format: DataFormat, num_fields: usize, policy: MalformedPolicy) -> Self {
        let num_fields = match format {
            DataFormat::Criteo => CRITEO_CONTINUOUS + CRITEO_CATEGORICAL,
            DataFormat::Text => num_fields,
        };
        Self {
            lines: reader.lines(),
            format,
            num_fields,
            policy,
            lineno: 0,
            skipped: 0,
        }
    }

    /// Apply the malformed-line policy to an error at the current line.
    /// Returns the error back under `Abort`, `None` under `Skip`.
    pub(crate) fn handle(&mut self, err: Error) -> Option<Error> {
        match (self.policy, &err) {
            (MalformedPolicy::Skip, Error::MalformedRecord { .. }) => {
                log::warn!("skipping {err}");
                self.skipped += 1;
                None
            }
            _ => Some(err),
        }
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<RawRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.lineno += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = match self.format {
                DataFormat::Text => parse_text_line(&line, self.num_fields, self.lineno),
                DataFormat::Criteo => parse_criteo_line(&line, self.lineno),
            };
            match parsed {
                Ok(r) => return Some(Ok(r)),
                Err(e) => {
                    if let Some(e) = self.handle(e) {
                        return Some(Err(e));
                    }
                }
            }
        }
    }
}

/// Largest field id + 1 over a text-format file.
pub fn infer_text_field_count(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::at_path(path, e))?;
    let mut max_field = None;
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        for part in line.split_ascii_whitespace().skip(1) {
            let field = part
                .split_once(':')
                .and_then(|(f, _)| f.parse::<usize>().ok())
                .ok_or_else(|| malformed(n + 1, format!("`{part}` is not field:token")))?;
            max_field = max_field.max(Some(field));
        }
    }
    max_field
        .map(|f| f + 1)
        .ok_or(Error::EmptyInput("no field entries in file"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadReport {
    pub instances: usize,
    /// Lines dropped under [`MalformedPolicy::Skip`].
    pub skipped: usize,
}

/// Parse and encode every record of `path` in file order.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: DataFormat,
    vocab: &Vocabulary,
    policy: MalformedPolicy,
    provenance: Provenance,
) -> Result<(Dataset, LoadReport)> {
    let mut reader = RecordReader::open(path, format, vocab.num_fields(), policy)?;
    let mut instances = Vec::new();
    while let Some(record) = reader.next() {
        match record.and_then(|r| vocab.encode(&r)) {
            Ok(x) => instances.push(x),
            Err(e) => {
                if let Some(e) = reader.handle(e) {
                    return Err(e);
                }
            }
        }
    }
    let report = LoadReport {
        instances: instances.len(),
        skipped: reader.skipped,
    };
    Ok((Dataset::new(instances, vocab.layout().clone(), provenance)?, report))
}

/// Write `ds` back out in text format, decoding categorical indices through
/// `vocab`. OOV entries are written as missing fields.
pub fn write_text_dataset(path: impl AsRef<Path>, ds: &Dataset, vocab: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut w = BufWriter::new(f);
    for x in ds.instances() {
        write!(w, "{}", x.label())?;
        for e in x.entries() {
            let field = vocab.layout().field_of(e.index).ok_or(Error::IndexOutOfRange {
                index: e.index,
                dim: vocab.dim(),
            })?;
            if let Some(token) = vocab.token_of(e.index) {
                write!(w, " {field}:{token}")?;
            } else if vocab.oov_index(field).is_none() {
                write!(w, " {field}:{:?}", e.value)?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::Schema;
    use crate::data::vocab::{build_vocabulary, VocabConfig};

    #[test]
    fn text_lines() {
        let r = parse_text_line("1 0:a 2:3.5", 3, 7).unwrap();
        assert_eq!(r.label, 1);
        assert_eq!(r.tokens, vec![Some("a".into()), None, Some("3.5".into())]);
        assert!(parse_text_line("2 0:a", 3, 1).is_err());
        assert!(parse_text_line("1 5:a", 3, 1).is_err());
        assert!(parse_text_line("1 0:a 0:b", 3, 1).is_err());
        assert!(parse_text_line("1 0a", 3, 1).is_err());
    }

    #[test]
    fn criteo_lines() {
        let mut cols = vec!["1".to_string()];
        cols.extend((0..13).map(|i| if i == 2 { String::new() } else { i.to_string() }));
        cols.extend((0..26).map(|i| format!("{:08x}", i * 7919)));
        let r = parse_criteo_line(&cols.join("\t"), 1).unwrap();
        assert_eq!(r.tokens.len(), 39);
        assert_eq!(r.tokens[2], None);
        assert_eq!(r.tokens[13].as_deref(), Some("00000000"));
        assert!(parse_criteo_line("1\t2\t3", 1).is_err());
    }

    fn vocab() -> Vocabulary {
        let schema = Schema::with_continuous(2, &[]).unwrap();
        let rows = ["a", "b"].map(|t| {
            Ok(RawRecord {
                line: 0,
                label: 0,
                tokens: vec![Some(t.into()), Some(t.into())],
            })
        });
        build_vocabulary(rows, &schema, VocabConfig { min_count: 1, ..Default::default() }).unwrap()
    }

    #[test]
    fn empty_file_loads_zero_instances() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, "").unwrap();
        let (ds, rep) = load_dataset(&p, DataFormat::Text, &vocab(), MalformedPolicy::Abort, Provenance::Train).unwrap();
        assert_eq!(ds.len(), 0);
        assert_eq!(rep.skipped, 0);
    }

    #[test]
    fn malformed_line_abort_or_skip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        let mut lines: Vec<String> = (0..10).map(|i| format!("{} 0:a 1:b", i % 2)).collect();
        lines[4] = "1 0:a 1:b 9:zz".into();
        std::fs::write(&p, lines.join("\n")).unwrap();

        let err = load_dataset(&p, DataFormat::Text, &vocab(), MalformedPolicy::Abort, Provenance::Train).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { line: 5, .. }), "{err}");

        let (ds, rep) = load_dataset(&p, DataFormat::Text, &vocab(), MalformedPolicy::Skip, Provenance::Train).unwrap();
        assert_eq!(ds.len(), 9);
        assert_eq!(rep.skipped, 1);
    }

    #[test]
    fn well_formed_file_counts_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        let lines: Vec<String> = (0..10).map(|i| format!("{} 0:{} 1:a", i % 2, if i < 5 { "a" } else { "b" })).collect();
        std::fs::write(&p, lines.join("\n")).unwrap();
        let v = vocab();
        let (ds, _) = load_dataset(&p, DataFormat::Text, &v, MalformedPolicy::Abort, Provenance::Train).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(infer_text_field_count(&p).unwrap(), 2);

        let q = dir.path().join("out.txt");
        write_text_dataset(&q, &ds, &v).unwrap();
        let (again, _) = load_dataset(&q, DataFormat::Text, &v, MalformedPolicy::Abort, Provenance::Train).unwrap();
        assert_eq!(again.instances(), ds.instances());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_dataset("/nonexistent/x.txt", DataFormat::Text, &vocab(), MalformedPolicy::Abort, Provenance::Test)
            .unwrap_err();
        assert!(matches!(err, Error::Path { .. }));
    }
}
