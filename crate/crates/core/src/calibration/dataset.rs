//! Timing dataset CSV.
//!
//! Header (required, any column order, case-insensitive):
//! `device,layer,w,h,cin,cout,k1,k2,stride,pad,batch,time_ms,runs,time_std_ms`.
//! Dense rows carry `w=h=k1=k2=stride=batch=1` and `pad=same`, with
//! `cin`/`cout` holding `din`/`dout`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::layer::{Conv2DDescriptor, DenseDescriptor, LayerDescriptor, Padding};

pub const COLUMNS: [&str; 14] = [
    "device",
    "layer",
    "w",
    "h",
    "cin",
    "cout",
    "k1",
    "k2",
    "stride",
    "pad",
    "batch",
    "time_ms",
    "runs",
    "time_std_ms",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected column `{0}`")]
    UnexpectedColumn(String),
    #[error("row {row}, column `{column}`: {message}")]
    Row {
        row: usize,
        column: String,
        message: String,
    },
    #[error("mapping file line {line}: {message}")]
    Mapping { line: usize, message: String },
}

/// One measured observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub layer: LayerDescriptor,
    pub device: String,
    /// Mean or median over `runs` repetitions.
    pub time_ms: f64,
    pub runs: u32,
    pub time_std_ms: Option<f64>,
}

/// Raw string fields of one row, keyed by canonical column name.
pub(crate) type RawRow = HashMap<&'static str, String>;

fn row_err(row: usize, column: &str, message: impl Into<String>) -> DatasetError {
    DatasetError::Row {
        row,
        column: column.to_owned(),
        message: message.into(),
    }
}

fn field<'a>(raw: &'a RawRow, row: usize, column: &'static str) -> Result<&'a str, DatasetError> {
    raw.get(column)
        .map(|s| s.trim())
        .ok_or_else(|| row_err(row, column, "missing value"))
}

fn positive(raw: &RawRow, row: usize, column: &'static str) -> Result<u32, DatasetError> {
    let text = field(raw, row, column)?;
    let v: u32 = text
        .parse()
        .map_err(|_| row_err(row, column, format!("`{text}` is not a positive integer")))?;
    if v == 0 {
        return Err(row_err(row, column, "must be at least 1"));
    }
    Ok(v)
}

fn real(raw: &RawRow, row: usize, column: &'static str) -> Result<f64, DatasetError> {
    let text = field(raw, row, column)?;
    let v: f64 = text
        .parse()
        .map_err(|_| row_err(row, column, format!("`{text}` is not a number")))?;
    if !v.is_finite() {
        return Err(row_err(row, column, "must be finite"));
    }
    Ok(v)
}

/// Validates one row. `row` is the 1-based data row number used in errors.
pub(crate) fn parse_row(raw: &RawRow, row: usize) -> Result<TimingRecord, DatasetError> {
    let device = field(raw, row, "device")?;
    if device.is_empty() {
        return Err(row_err(row, "device", "empty device label"));
    }
    let w = positive(raw, row, "w")?;
    let h = positive(raw, row, "h")?;
    let cin = positive(raw, row, "cin")?;
    let cout = positive(raw, row, "cout")?;
    let k1 = positive(raw, row, "k1")?;
    let k2 = positive(raw, row, "k2")?;
    let stride = positive(raw, row, "stride")?;
    let batch = positive(raw, row, "batch")?;
    let pad_text = field(raw, row, "pad")?;
    let padding: Padding = pad_text
        .parse()
        .map_err(|m: String| row_err(row, "pad", m))?;

    let layer = match field(raw, row, "layer")? {
        "dense" => {
            for (column, value) in [
                ("w", w),
                ("h", h),
                ("k1", k1),
                ("k2", k2),
                ("stride", stride),
                ("batch", batch),
            ] {
                if value != 1 {
                    return Err(row_err(
                        row,
                        column,
                        format!("dense rows need {column}=1, got {value}"),
                    ));
                }
            }
            if padding != Padding::Same {
                return Err(row_err(row, "pad", "dense rows need pad=same"));
            }
            LayerDescriptor::Dense(DenseDescriptor::new(cin, cout))
        }
        "conv2d" => {
            let conv = Conv2DDescriptor {
                w_in: w,
                h_in: h,
                c_in: cin,
                c_out: cout,
                k1,
                k2,
                stride,
                padding,
                batch,
            };
            conv.validate()
                .map_err(|e| row_err(row, "k1", e.to_string()))?;
            LayerDescriptor::Conv2D(conv)
        }
        other => {
            return Err(row_err(
                row,
                "layer",
                format!("unknown layer `{other}` (expected dense|conv2d)"),
            ))
        }
    };

    let time_ms = real(raw, row, "time_ms")?;
    if time_ms <= 0.0 {
        return Err(row_err(
            row,
            "time_ms",
            format!("must be > 0, got {time_ms}"),
        ));
    }
    let runs = positive(raw, row, "runs")?;
    let time_std_ms = match raw.get("time_std_ms").map(|s| s.trim()) {
        None | Some("") => None,
        Some(_) => {
            let std = real(raw, row, "time_std_ms")?;
            if std < 0.0 {
                return Err(row_err(row, "time_std_ms", "must be >= 0"));
            }
            Some(std)
        }
    };
    Ok(TimingRecord {
        layer,
        device: device.to_owned(),
        time_ms,
        runs,
        time_std_ms,
    })
}

/// Reads and validates a timing CSV.
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<TimingRecord>, DatasetError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = csv.headers()?.clone();
    let mut positions: Vec<&'static str> = Vec::with_capacity(header.len());
    for name in header.iter() {
        let norm = name.trim().to_ascii_lowercase();
        let canonical = COLUMNS
            .iter()
            .find(|c| **c == norm)
            .ok_or_else(|| DatasetError::UnexpectedColumn(name.to_owned()))?;
        if positions.contains(canonical) {
            return Err(DatasetError::UnexpectedColumn(format!(
                "{name} (duplicate)"
            )));
        }
        positions.push(canonical);
    }
    if let Some(missing) = COLUMNS.iter().find(|c| !positions.contains(c)) {
        return Err(DatasetError::MissingColumn((*missing).to_owned()));
    }

    let mut records = Vec::new();
    for (idx, result) in csv.records().enumerate() {
        let row = idx + 1;
        let fields = result?;
        let raw: RawRow = positions
            .iter()
            .zip(fields.iter())
            .map(|(c, v)| (*c, v.to_owned()))
            .collect();
        records.push(parse_row(&raw, row)?);
    }
    Ok(records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TimingRecord>, DatasetError> {
    read_dataset(std::fs::File::open(path)?)
}

/// Canonical field values of one record, in [`COLUMNS`] order.
fn record_fields(r: &TimingRecord) -> [String; 14] {
    let conv = r.layer.as_conv();
    let (w, h, k1, k2, stride, pad, batch) = match r.layer {
        LayerDescriptor::Dense(_) => (1, 1, 1, 1, 1, Padding::Same, 1),
        LayerDescriptor::Conv2D(c) => (c.w_in, c.h_in, c.k1, c.k2, c.stride, c.padding, c.batch),
    };
    [
        r.device.clone(),
        r.layer.kind().to_owned(),
        w.to_string(),
        h.to_string(),
        conv.c_in.to_string(),
        conv.c_out.to_string(),
        k1.to_string(),
        k2.to_string(),
        stride.to_string(),
        pad.to_string(),
        batch.to_string(),
        r.time_ms.to_string(),
        r.runs.to_string(),
        r.time_std_ms.map(|s| s.to_string()).unwrap_or_default(),
    ]
}

/// Writes records with the canonical header. Floats use their shortest
/// round-trip representation.
pub fn write_dataset<W: Write>(writer: W, records: &[TimingRecord]) -> Result<(), DatasetError> {
    let mut csv = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    csv.write_record(COLUMNS)?;
    for r in records {
        csv.write_record(record_fields(r))?;
    }
    csv.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[TimingRecord]) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path)?;
    write_dataset(std::io::BufWriter::new(file), records)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "device,layer,w,h,cin,cout,k1,k2,stride,pad,batch,time_ms,runs,time_std_ms\n";

    fn parse(body: &str) -> Result<Vec<TimingRecord>, DatasetError> {
        read_dataset(format!("{HEADER}{body}").as_bytes())
    }

    #[test]
    fn one_row() {
        let recs = parse("t2000,conv2d,4,4,3200,3200,1,1,1,same,1,0.454,2000,\n").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(
            recs[0].layer,
            LayerDescriptor::Conv2D(Conv2DDescriptor::new(4, 4, 3200, 3200, 1))
        );
        assert_eq!(recs[0].time_std_ms, None);
        let dense = parse("t2000,dense,1,1,12800,12800,1,1,1,same,1,6.401,2000,0.01\n").unwrap();
        assert_eq!(
            dense[0].layer,
            LayerDescriptor::Dense(DenseDescriptor::new(12800, 12800))
        );
        assert_eq!(dense[0].time_std_ms, Some(0.01));
    }

    #[test]
    fn zero_time_names_row_and_column() {
        let body = "a,conv2d,4,4,3,3,1,1,1,same,1,1.0,1,\na,conv2d,4,4,3,3,1,1,1,same,1,0,1,\n";
        match parse(body) {
            Err(DatasetError::Row { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "time_ms");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_errors() {
        let no_runs = "device,layer,w,h,cin,cout,k1,k2,stride,pad,batch,time_ms,time_std_ms\n";
        assert!(
            matches!(read_dataset(no_runs.as_bytes()), Err(DatasetError::MissingColumn(c)) if c == "runs")
        );
        let extra = format!("{},extra\n", HEADER.trim_end());
        assert!(matches!(
            read_dataset(extra.as_bytes()),
            Err(DatasetError::UnexpectedColumn(_))
        ));
        assert!(matches!(
            parse("a,conv2d,x,4,3,3,1,1,1,same,1,1.0,1,\n"),
            Err(DatasetError::Row { column, .. }) if column == "w"
        ));
        assert!(matches!(
            parse("a,dense,2,1,3,3,1,1,1,same,1,1.0,1,\n"),
            Err(DatasetError::Row { column, .. }) if column == "w"
        ));
        assert!(matches!(
            parse("a,pool,1,1,3,3,1,1,1,same,1,1.0,1,\n"),
            Err(DatasetError::Row { column, .. }) if column == "layer"
        ));
        assert!(matches!(
            parse("a,conv2d,1,1,3,3,1,1,1,same,1,1.0,1,-2\n"),
            Err(DatasetError::Row { column, .. }) if column == "time_std_ms"
        ));
    }

    #[test]
    fn header_normalization_and_order() {
        let text = " Layer ,DEVICE,w,h,cin,cout,k1,k2,stride,pad,batch,time_ms,runs,time_std_ms\nconv2d,gpu,2,2,6400,6400,1,1,1,same,1,1.626,2000,\n";
        let recs = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(recs[0].device, "gpu");
        let mut out = Vec::new();
        write_dataset(&mut out, &recs).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            format!("{HEADER}gpu,conv2d,2,2,6400,6400,1,1,1,same,1,1.626,2000,\n")
        );
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let mut out = Vec::new();
        write_dataset(&mut out, &[]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), HEADER);
        assert!(read_dataset(HEADER.as_bytes()).unwrap().is_empty());
    }
}
