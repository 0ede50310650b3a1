//! Result tables: rows are (representation, layer), columns are tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::trainer::RunReport;

/// Formats `v` to two decimals, rounding half to even on the shortest
/// decimal representation of `v` (so 73.195 gives "73.20", 73.185 "73.18").
pub fn format_2dp(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let s = format!("{}", v.abs());
    let (int, frac) = s.split_once('.').unwrap_or((&s, ""));
    let mut digits: Vec<u8> = int.bytes().chain(frac.bytes().chain(std::iter::repeat(b'0')).take(2)).map(|b| b - b'0').collect();
    let rest = frac.as_bytes().get(2..).unwrap_or(&[]);
    let round_up = match rest.first() {
        Some(&d) if d > b'5' => true,
        Some(&b'5') => rest[1..].iter().any(|&d| d != b'0') || digits.last().unwrap() % 2 == 1,
        _ => false,
    };
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let n = digits.len();
    let text: String = digits.iter().map(|d| char::from(b'0' + d)).collect();
    let body = format!("{}.{}", &text[..n - 2], &text[n - 2..]);
    if v < 0.0 && body.bytes().any(|b| b != b'0' && b != b'.') {
        format!("-{body}")
    } else {
        body
    }
}

/// The value a table cell stores: the 2-decimal rendering read back.
pub fn round_2dp(v: f64) -> f64 {
    format_2dp(v).parse().unwrap_or(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub representation: String,
    pub layer: String,
    /// One entry per column; `None` where no report exists.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub tasks: Vec<String>,
    pub rows: Vec<TableRow>,
}

fn layer_order(label: &str) -> (usize, usize) {
    match label.parse::<usize>() {
        Ok(l) => (0, l),
        Err(_) => (1, 0),
    }
}

/// Collects reports into a table. Tasks are sorted by name, rows by
/// representation then ascending layer with the mix last. When reports of
/// several probe architectures are mixed, the representation label carries
/// the architecture. Values are rounded to two decimals.
pub fn build_table(reports: &[RunReport]) -> ResultTable {
    let archs: BTreeSet<&str> = reports.iter().map(|r| r.arch.as_str()).collect();
    let label = |r: &RunReport| {
        if archs.len() > 1 {
            format!("{} [{}]", r.representation, r.arch)
        } else {
            r.representation.clone()
        }
    };
    let tasks: Vec<String> = reports.iter().map(|r| r.task.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut cells: BTreeMap<(String, (usize, usize), String), BTreeMap<&str, f64>> = BTreeMap::new();
    for r in reports {
        let layer = r.layer.label();
        cells.entry((label(r), layer_order(&layer), layer)).or_default().insert(r.task.as_str(), r.value);
    }
    let rows = cells
        .into_iter()
        .map(|((representation, _, layer), by_task)| TableRow {
            representation,
            layer,
            values: tasks.iter().map(|t| by_task.get(t.as_str()).map(|&v| round_2dp(v))).collect(),
        })
        .collect();
    ResultTable { tasks, rows }
}

pub fn table_csv(table: &ResultTable) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["representation".to_string(), "layer".to_string()];
    header.extend(table.tasks.iter().cloned());
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![row.representation.clone(), row.layer.clone()];
        rec.extend(row.values.iter().map(|v| v.map(format_2dp).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Data(e.to_string()))
}

pub fn parse_table_csv<R: Read>(input: R) -> Result<ResultTable, ReportError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 2 || &header[0] != "representation" || &header[1] != "layer" {
        return Err(ReportError::Data("table header must start with representation,layer".into()));
    }
    let tasks: Vec<String> = header.iter().skip(2).map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(2)
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>().map(Some).map_err(|e| ReportError::Data(format!("cell {c:?}: {e}")))
                }
            })
            .collect::<Result<_, _>>()?;
        rows.push(TableRow { representation: rec[0].to_string(), layer: rec[1].to_string(), values });
    }
    Ok(ResultTable { tasks, rows })
}

pub fn table_json(table: &ResultTable) -> Result<String, ReportError> {
    Ok(serde_json::to_string_pretty(table)? + "\n")
}

/// One heatmap row for a sweep: `task,representation,arch,<layer labels…>`.
pub fn heatmap_row_csv(reports: &[RunReport]) -> Result<String, ReportError> {
    let first = reports.first().ok_or_else(|| ReportError::Data("no reports".into()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["task".to_string(), "representation".into(), "arch".into()];
    header.extend(reports.iter().map(|r| r.layer.label()));
    w.write_record(&header)?;
    let mut rec = vec![first.task.clone(), first.representation.clone(), first.arch.clone()];
    rec.extend(reports.iter().map(|r| format_2dp(r.value)));
    w.write_record(&rec)?;
    let bytes = w.into_inner().map_err(|e| ReportError::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Data(e.to_string()))
}

/// Heatmap grid of one representation: layers (rows) × tasks (columns).
pub fn layer_task_grid(table: &ResultTable, representation: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let rows: Vec<&TableRow> = table.rows.iter().filter(|r| r.representation == representation).collect();
    let labels = rows.iter().map(|r| r.layer.clone()).collect();
    let values = rows.iter().map(|r| r.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect()).collect();
    (labels, values)
}
