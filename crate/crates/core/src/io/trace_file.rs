//! Attention traces as structured text: a header describing the run, one
//! label line per modality, then one record per (layer, unit, head) with
//! its attention matrix. Rows are written at full precision (shortest
//! round-trip formatting), so parsed values are bit-exact.
//!
//! Record label domains follow the unit tag: SA_Y rows/cols are tokens,
//! SA_X rows/cols are objects, GA_XY rows are objects and cols are tokens.

use crate::cascade::{CascadeStrategy, McaVariant};
use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, UnitTag};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT_LINE: &str = "trace 1";
/// Row-sum slack for validation; softmax rows are exact to f64 rounding.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Header fields identifying what produced the trace.
#[derive(Debug, Clone)]
pub struct TraceMeta {
    pub sample: usize,
    pub variant: McaVariant,
    pub strategy: CascadeStrategy,
    pub layers: usize,
    pub heads: usize,
}

fn labels_or_default(labels: &[String], prefix: &str, n: usize) -> Vec<String> {
    if labels.is_empty() {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    } else {
        labels.to_vec()
    }
}

pub fn render(trace: &AttentionTrace, meta: &TraceMeta) -> Result<String> {
    let (m, n) = trace_dims(trace)?;
    let x_labels = labels_or_default(&trace.x_labels, "x", m);
    let y_labels = labels_or_default(&trace.y_labels, "y", n);
    if x_labels.len() != m || y_labels.len() != n {
        return Err(Error::Config(format!(
            "trace labels ({}, {}) do not match matrix dims ({m}, {n})",
            x_labels.len(),
            y_labels.len()
        )));
    }
    for label in x_labels.iter().chain(&y_labels) {
        if label.is_empty() || label.contains(char::is_whitespace) {
            return Err(Error::Config(format!(
                "trace label {label:?} must be nonempty and whitespace-free"
            )));
        }
    }

    let mut out = String::new();
    out.push_str(FORMAT_LINE);
    out.push('\n');
    out.push_str(&format!("sample {}\n", meta.sample));
    out.push_str(&format!("variant {}\n", meta.variant.as_str()));
    out.push_str(&format!("strategy {}\n", meta.strategy.as_str()));
    out.push_str(&format!("layers {}\n", meta.layers));
    out.push_str(&format!("heads {}\n", meta.heads));
    out.push_str(&format!("x_labels {}\n", x_labels.join(" ")));
    out.push_str(&format!("y_labels {}\n", y_labels.join(" ")));
    for record in &trace.records {
        let matrix = &record.matrix;
        out.push_str(&format!(
            "record layer={} unit={} head={} rows={} cols={}\n",
            record.layer,
            record.unit.as_str(),
            record.head,
            matrix.rows(),
            matrix.cols()
        ));
        for r in 0..matrix.rows() {
            let cells: Vec<String> = matrix.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str("row ");
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
    }
    Ok(out)
}

/// The object/token counts implied by the matrices, checked for agreement
/// across records.
fn trace_dims(trace: &AttentionTrace) -> Result<(usize, usize)> {
    let mut m = trace.x_labels.len();
    let mut n = trace.y_labels.len();
    for record in &trace.records {
        let (rows, cols) = (record.matrix.rows(), record.matrix.cols());
        let (rd, cd) = record.unit.domains();
        for (dim, domain) in [(rows, rd), (cols, cd)] {
            let slot = if domain == 'x' { &mut m } else { &mut n };
            if *slot == 0 {
                *slot = dim;
            } else if *slot != dim {
                return Err(Error::Config(format!(
                    "record layer={} unit={} disagrees on the {domain} dimension: {dim} vs {slot}",
                    record.layer,
                    record.unit.as_str()
                )));
            }
        }
    }
    Ok((m, n))
}

pub fn write_trace(path: &Path, trace: &AttentionTrace, meta: &TraceMeta) -> Result<()> {
    std::fs::write(path, render(trace, meta)?)?;
    Ok(())
}

/// What a validated trace file contains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceSummary {
    pub sample: usize,
    pub layers: usize,
    pub heads: usize,
    pub records: usize,
    pub unit_counts: BTreeMap<String, usize>,
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format {
        path: "trace".into(),
        reason: reason.into(),
    }
}

/// Parse a trace and reject any attention row that does not sum to 1 within
/// `ROW_SUM_TOL`, any dimension mismatch, or any structural defect.
pub fn validate(text: &str) -> Result<TraceSummary> {
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(malformed("missing format line"));
    }
    let mut header = BTreeMap::new();
    let mut x_labels: Vec<String> = Vec::new();
    let mut y_labels: Vec<String> = Vec::new();
    let mut pending: Option<(String, usize, usize, Vec<Vec<f64>>)> = None;
    let mut records = 0usize;
    let mut unit_counts: BTreeMap<String, usize> = BTreeMap::new();

    let finish = |rec: Option<(String, usize, usize, Vec<Vec<f64>>)>| -> Result<()> {
        let Some((unit, rows, _, matrix)) = rec else {
            return Ok(());
        };
        if matrix.len() != rows {
            return Err(malformed(format!(
                "{unit} record declares {rows} rows but has {}",
                matrix.len()
            )));
        }
        for (r, row) in matrix.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(malformed(format!(
                    "{unit} row {r} sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    };

    for line in lines {
        if let Some(rest) = line.strip_prefix("record ") {
            finish(pending.take())?;
            records += 1;
            let mut fields = BTreeMap::new();
            for pair in rest.split(' ') {
                let (k, v) = pair
                    .split_once('=')
                    .ok_or_else(|| malformed(format!("bad record field {pair:?}")))?;
                fields.insert(k.to_string(), v.to_string());
            }
            let unit = fields
                .get("unit")
                .ok_or_else(|| malformed("record missing unit"))?
                .clone();
            let dim = |key: &str| -> Result<usize> {
                fields
                    .get(key)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| malformed(format!("record missing {key}")))
            };
            let tag = UnitTag::parse(&unit)
                .ok_or_else(|| malformed(format!("unknown unit tag {unit:?}")))?;
            let (rows, cols) = (dim("rows")?, dim("cols")?);
            let (rd, cd) = tag.domains();
            let expect = |domain: char, dim: usize| -> Result<()> {
                let labels = if domain == 'x' { &x_labels } else { &y_labels };
                if !labels.is_empty() && labels.len() != dim {
                    return Err(malformed(format!(
                        "{unit} {domain}-dimension {dim} does not match {} labels",
                        labels.len()
                    )));
                }
                Ok(())
            };
            expect(rd, rows)?;
            expect(cd, cols)?;
            *unit_counts.entry(unit.clone()).or_insert(0) += 1;
            pending = Some((unit, rows, cols, Vec::new()));
        } else if let Some(rest) = line.strip_prefix("row ") {
            let Some((_, _, cols, matrix)) = pending.as_mut() else {
                return Err(malformed("row outside any record"));
            };
            let values: Vec<f64> = rest
                .split(' ')
                .map(|v| v.parse().map_err(|_| malformed(format!("bad cell {v:?}"))))
                .collect::<Result<_>>()?;
            if values.len() != *cols {
                return Err(malformed(format!(
                    "row has {} cells, expected {cols}",
                    values.len()
                )));
            }
            matrix.push(values);
        } else if let Some((key, value)) = line.split_once(' ') {
            match key {
                "x_labels" => x_labels = value.split(' ').map(str::to_string).collect(),
                "y_labels" => y_labels = value.split(' ').map(str::to_string).collect(),
                _ => {
                    header.insert(key.to_string(), value.to_string());
                }
            }
        } else if !line.is_empty() {
            return Err(malformed(format!("unparseable line {line:?}")));
        }
    }
    finish(pending.take())?;

    let field = |key: &str| -> Result<usize> {
        header
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| malformed(format!("missing header field {key}")))
    };
    Ok(TraceSummary {
        sample: field("sample")?,
        layers: field("layers")?,
        heads: field("heads")?,
        records,
        unit_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::trace::TraceRecord;

    fn meta() -> TraceMeta {
        TraceMeta {
            sample: 3,
            variant: McaVariant::SaSga,
            strategy: CascadeStrategy::Stacking,
            layers: 1,
            heads: 1,
        }
    }

    fn record(unit: UnitTag, rows: usize, cols: usize) -> TraceRecord {
        let data: Vec<f64> = (0..rows)
            .flat_map(|_| {
                let mut row = vec![0.0; cols];
                let share = 1.0 / cols as f64;
                for v in &mut row {
                    *v = share;
                }
                row
            })
            .collect();
        TraceRecord {
            layer: 0,
            unit,
            head: 0,
            matrix: Tensor::from_vec(&[rows, cols], data).unwrap(),
        }
    }

    fn trace(m: usize, n: usize) -> AttentionTrace {
        AttentionTrace {
            records: vec![
                record(UnitTag::SaY, n, n),
                record(UnitTag::SaX, m, m),
                record(UnitTag::GaXy, m, n),
            ],
            x_labels: (0..m).map(|i| format!("obj{i}:red-circle")).collect(),
            y_labels: (0..n).map(|i| format!("tok{i}")).collect(),
        }
    }

    #[test]
    fn render_validate_round_trip() {
        let text = render(&trace(3, 2), &meta()).unwrap();
        let summary = validate(&text).unwrap();
        assert_eq!(summary.sample, 3);
        assert_eq!(summary.records, 3);
        assert_eq!(summary.unit_counts["SA_Y"], 1);
        assert_eq!(summary.unit_counts["GA_XY"], 1);
    }

    #[test]
    fn full_precision_cells_survive_the_text_format() {
        let mut t = trace(2, 2);
        let odd = 1.0 / 3.0;
        t.records[2].matrix =
            Tensor::from_vec(&[2, 2], vec![odd, 1.0 - odd, 0.1, 0.9]).unwrap();
        let text = render(&t, &meta()).unwrap();
        let line = text.lines().find(|l| l.contains(&odd.to_string())).unwrap();
        let cell: f64 = line.split(' ').nth(1).unwrap().parse().unwrap();
        assert_eq!(cell, odd);
        validate(&text).unwrap();
    }

    #[test]
    fn bad_row_sum_is_rejected() {
        let mut t = trace(2, 2);
        t.records[0].matrix = Tensor::from_vec(&[2, 2], vec![0.5, 0.49, 0.5, 0.5]).unwrap();
        let text = render(&t, &meta()).unwrap();
        let err = validate(&text).unwrap_err().to_string();
        assert!(err.contains("sums to"), "{err}");
    }

    #[test]
    fn dimension_and_label_mismatches_are_rejected() {
        // Record dims disagreeing across units.
        let bad = AttentionTrace {
            records: vec![record(UnitTag::SaX, 3, 3), record(UnitTag::GaXy, 4, 2)],
            x_labels: vec![],
            y_labels: vec![],
        };
        assert!(render(&bad, &meta()).is_err());

        // Labels not matching matrix dims, caught by the validator.
        let text = render(&trace(3, 2), &meta()).unwrap();
        let tampered = text.replace("x_labels obj0:red-circle obj1:red-circle obj2:red-circle", "x_labels a b");
        assert!(validate(&tampered).is_err());
    }

    #[test]
    fn structural_defects_are_rejected() {
        assert!(validate("not a trace").is_err());
        let text = render(&trace(2, 2), &meta()).unwrap();
        let no_rows = text.replace("row 0.5 0.5\n", "");
        assert!(validate(&no_rows).is_err());
        let orphan = format!("{FORMAT_LINE}\nsample 0\nlayers 1\nheads 1\nrow 1.0\n");
        assert!(validate(&orphan).is_err());
    }

    #[test]
    fn default_labels_fill_in_when_absent() {
        let mut t = trace(2, 2);
        t.x_labels.clear();
        t.y_labels.clear();
        let text = render(&t, &meta()).unwrap();
        assert!(text.contains("x_labels x0 x1"));
        assert!(text.contains("y_labels y0 y1"));
        validate(&text).unwrap();
    }
}
