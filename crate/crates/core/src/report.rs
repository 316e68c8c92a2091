//! Prediction reports (TSV) and line charts (SVG).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::alpha::{alpha_factor, AlphaInput, AlphaParams};
use crate::calibration::TimingRecord;
use crate::layer::{LayerDescriptor, LayerError};

pub const REPORT_COLUMNS: [&str; 7] = [
    "layer",
    "flops",
    "alpha",
    "alpha_flops",
    "predicted_ms",
    "measured_ms",
    "ape_pct",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub layer: LayerDescriptor,
    pub flops: u64,
    pub alpha: f64,
    pub alpha_flops: f64,
    pub predicted_ms: Option<f64>,
    pub measured_ms: Option<f64>,
    /// Absolute percentage error, in percent.
    pub ape: Option<f64>,
}

impl ReportRow {
    /// Row for a bare layer. `predicted_ms` is filled in from the params'
    /// time-per-FLOP constant.
    pub fn for_layer(layer: &LayerDescriptor, params: &AlphaParams) -> Result<Self, LayerError> {
        let conv = layer.as_conv();
        let flops = crate::layer::conv_flops(&conv)?;
        let alpha = alpha_factor(&AlphaInput::for_conv(&conv)?, params);
        let alpha_flops = flops as f64 * alpha;
        Ok(Self {
            layer: *layer,
            flops,
            alpha,
            alpha_flops,
            predicted_ms: Some(alpha_flops * params.time_per_flop_c() * 1e3),
            measured_ms: None,
            ape: None,
        })
    }

    pub fn for_record(record: &TimingRecord, params: &AlphaParams) -> Result<Self, LayerError> {
        let mut row = Self::for_layer(&record.layer, params)?;
        let predicted = row.predicted_ms.expect("set by for_layer");
        row.measured_ms = Some(record.time_ms);
        row.ape = Some(100.0 * (predicted - record.time_ms).abs() / record.time_ms);
        Ok(row)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn from_records(
        records: &[TimingRecord],
        params: &AlphaParams,
    ) -> Result<Self, LayerError> {
        let rows = records
            .iter()
            .map(|r| ReportRow::for_record(r, params))
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn from_layers(
        layers: &[LayerDescriptor],
        params: &AlphaParams,
    ) -> Result<Self, LayerError> {
        let rows = layers
            .iter()
            .map(|l| ReportRow::for_layer(l, params))
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    /// Mean and max APE over the rows that carry a measurement.
    pub fn error_summary(&self) -> Option<(f64, f64)> {
        let apes: Vec<f64> = self.rows.iter().filter_map(|r| r.ape).collect();
        if apes.is_empty() {
            return None;
        }
        let mean = apes.iter().sum::<f64>() / apes.len() as f64;
        let max = apes.iter().cloned().fold(0.0, f64::max);
        Some((mean, max))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = REPORT_COLUMNS.join("\t");
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), significant);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.layer,
                r.flops,
                significant(r.alpha),
                significant(r.alpha_flops),
                opt(r.predicted_ms),
                opt(r.measured_ms),
                opt(r.ape),
            );
        }
        if let Some((mape, max_ape)) = self.error_summary() {
            let _ = writeln!(out, "# mape_pct={mape:.3}\tmax_ape_pct={max_ape:.3}");
        }
        out
    }

    /// Rows grouped by FLOPs count, in first-appearance order.
    pub fn groups(&self) -> Vec<(u64, Vec<&ReportRow>)> {
        let mut order: Vec<u64> = Vec::new();
        let mut by_flops: BTreeMap<u64, Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            by_flops
                .entry(r.flops)
                .or_insert_with(|| {
                    order.push(r.flops);
                    Vec::new()
                })
                .push(r);
        }
        order
            .into_iter()
            .map(|f| (f, by_flops.remove(&f).unwrap_or_default()))
            .collect()
    }

    /// One SVG chart per equal-FLOPs group: `(flops, svg)`.
    pub fn svg_charts(&self) -> Vec<(u64, String)> {
        self.groups()
            .into_iter()
            .map(|(flops, rows)| (flops, svg_chart(flops, &rows)))
            .collect()
    }
}

/// Seven significant digits, without exponent for magnitudes in `[1e-3, 1e9)`.
fn significant(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if (-3..9).contains(&mag) {
        let decimals = (6 - mag).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.6e}")
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn svg_chart(flops: u64, rows: &[&ReportRow]) -> String {
    let values = rows
        .iter()
        .flat_map(|r| [r.measured_ms, r.predicted_ms])
        .flatten();
    let y_max = values.fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let n = rows.len();
    let x_of = |i: usize| {
        if n <= 1 {
            WIDTH / 2.0
        } else {
            MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (n - 1) as f64
        }
    };
    let y_of = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * v / y_max;
    let path = |pick: fn(&ReportRow) -> Option<f64>| -> String {
        rows.iter()
            .enumerate()
            .filter_map(|(i, r)| pick(r).map(|v| format!("{:.2},{:.2}", x_of(i), y_of(v))))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    svg.push_str("<!--\n");
    svg.push_str("index\tlayer\tpredicted_ms\tmeasured_ms\n");
    for (i, r) in rows.iter().enumerate() {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), significant);
        let _ = writeln!(
            svg,
            "{i}\t{}\t{}\t{}",
            r.layer,
            f(r.predicted_ms),
            f(r.measured_ms)
        );
    }
    svg.push_str("-->\n");
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{flops} FLOPs, y max {y_max:.4} ms</text>"#
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="black"/>"#,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
    );
    let measured = path(|r| r.measured_ms);
    if !measured.is_empty() {
        let _ = writeln!(
            svg,
            r#"<polyline class="measured" fill="none" stroke="steelblue" stroke-width="2" points="{measured}"/>"#
        );
    }
    let predicted = path(|r| r.predicted_ms);
    if !predicted.is_empty() {
        let _ = writeln!(
            svg,
            r#"<polyline class="predicted" fill="none" stroke="darkorange" stroke-width="2" stroke-dasharray="6 4" points="{predicted}"/>"#
        );
    }
    svg.push_str("</svg>\n");
    svg
}
