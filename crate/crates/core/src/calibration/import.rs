//! Import of third-party timing tables through a column-mapping file.
//!
//! Each mapping line binds one schema column to a source column or a
//! constant:
//!
//! ```text
//! # schema column = source column | const:<value>, times may be scaled
//! device  = const:quadro-t2000
//! layer   = const:conv2d
//! w       = W
//! k1      = K
//! k2      = K
//! time_ms = seconds * 1000
//! ```
//!
//! `stride`, `pad`, `batch`, `runs` and `time_std_ms` default to `1`, `same`,
//! `1`, `1` and empty when unmapped; every other column must be mapped.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use super::dataset::{parse_row, DatasetError, RawRow, TimingRecord, COLUMNS};

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Column { name: String, scale: Option<f64> },
    Const(String),
}

/// Parsed column-mapping file.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMapping {
    entries: Vec<(&'static str, Source)>,
}

const DEFAULTS: [(&str, &str); 5] = [
    ("stride", "1"),
    ("pad", "same"),
    ("batch", "1"),
    ("runs", "1"),
    ("time_std_ms", ""),
];

impl std::str::FromStr for ColumnMapping {
    type Err = DatasetError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let err = |line: usize, message: String| DatasetError::Mapping { line, message };
        let mut entries: Vec<(&'static str, Source)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (target, source) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `column = source`, got `{content}`")))?;
            let target = target.trim();
            let target = *COLUMNS
                .iter()
                .find(|c| **c == target)
                .ok_or_else(|| err(line, format!("unknown schema column `{target}`")))?;
            if entries.iter().any(|(t, _)| *t == target) {
                return Err(err(line, format!("column `{target}` mapped twice")));
            }
            let source = source.trim();
            let source = if let Some(value) = source.strip_prefix("const:") {
                Source::Const(value.trim().to_owned())
            } else if let Some((name, factor)) = source.split_once('*') {
                if !matches!(target, "time_ms" | "time_std_ms") {
                    return Err(err(
                        line,
                        format!("scaling is only allowed for time columns, not `{target}`"),
                    ));
                }
                let factor: f64 = factor
                    .trim()
                    .parse()
                    .map_err(|_| err(line, format!("`{}` is not a number", factor.trim())))?;
                Source::Column {
                    name: name.trim().to_owned(),
                    scale: Some(factor),
                }
            } else {
                Source::Column {
                    name: source.to_owned(),
                    scale: None,
                }
            };
            if matches!(&source, Source::Column { name, .. } if name.is_empty()) {
                return Err(err(line, "empty source column".into()));
            }
            entries.push((target, source));
        }
        for column in COLUMNS {
            let has_default = DEFAULTS.iter().any(|(c, _)| *c == column);
            if !has_default && !entries.iter().any(|(t, _)| *t == column) {
                return Err(err(0, format!("schema column `{column}` is not mapped")));
            }
        }
        Ok(Self { entries })
    }
}

impl ColumnMapping {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        std::fs::read_to_string(path)?.parse()
    }

    /// Reads a source CSV (with header) and converts each row. Errors carry
    /// the 1-based source row number.
    pub fn import<R: Read>(&self, reader: R) -> Result<Vec<TimingRecord>, DatasetError> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header: HashMap<String, usize> = csv
            .headers()?
            .iter()
            .enumerate()
            .map(|(i, name)| (name.trim().to_owned(), i))
            .collect();
        for (_, source) in &self.entries {
            if let Source::Column { name, .. } = source {
                if !header.contains_key(name) {
                    return Err(DatasetError::MissingColumn(name.clone()));
                }
            }
        }

        let mut records = Vec::new();
        for (idx, result) in csv.records().enumerate() {
            let row = idx + 1;
            let fields = result?;
            let mut raw: RawRow = DEFAULTS
                .iter()
                .map(|(c, v)| (*c, (*v).to_owned()))
                .collect();
            for (target, source) in &self.entries {
                let value = match source {
                    Source::Const(v) => v.clone(),
                    Source::Column { name, scale } => {
                        let text = fields.get(header[name]).unwrap_or("").trim();
                        match scale {
                            None => text.to_owned(),
                            Some(_) if text.is_empty() => String::new(),
                            Some(factor) => {
                                let v: f64 = text.parse().map_err(|_| DatasetError::Row {
                                    row,
                                    column: (*target).to_owned(),
                                    message: format!(
                                        "source column `{name}`: `{text}` is not a number"
                                    ),
                                })?;
                                (v * factor).to_string()
                            }
                        }
                    }
                };
                raw.insert(target, value);
            }
            records.push(parse_row(&raw, row)?);
        }
        Ok(records)
    }

    pub fn import_file(&self, path: impl AsRef<Path>) -> Result<Vec<TimingRecord>, DatasetError> {
        self.import(std::fs::File::open(path)?)
    }
}
