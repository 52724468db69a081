//! Tab-separated experiment reports mirroring the adaptation and overhead
//! table layouts. Cell values are average elapsed minutes over the
//! repetitions; the Diff/No % rows are computed from the same report's cells
//! ((no - with) / no * 100, negative meaning overhead).

use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Averaged elapsed minutes for one (no, with) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPair {
    pub no_qos_min: Option<f64>,
    pub with_qos_min: Option<f64>,
}

impl CellPair {
    pub fn diff_pct(&self) -> Option<f64> {
        match (self.no_qos_min, self.with_qos_min) {
            (Some(no), Some(with)) if no > 0.0 => Some((no - with) / no * 100.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    /// Header metadata, emitted as `# key=value` in insertion order.
    pub meta: Vec<(String, String)>,
    /// Row label column name ("n" or "period").
    pub row_kind: String,
    pub row_labels: Vec<String>,
    pub vector_sizes: Vec<usize>,
    /// Cells keyed by (row label, vector size).
    pub cells: BTreeMap<(String, usize), CellPair>,
}

fn fmt_min(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.4}", v),
        None => "NA".into(),
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", v),
        None => "NA".into(),
    }
}

impl ExperimentReport {
    pub fn cell(&self, row: &str, size: usize) -> Option<&CellPair> {
        self.cells.get(&(row.to_string(), size))
    }

    pub fn diff_pct(&self, row: &str, size: usize) -> Option<f64> {
        self.cell(row, size).and_then(|c| c.diff_pct())
    }

    /// Canonical TSV rendering; identical inputs yield identical bytes.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let meta: Vec<String> = self.meta.iter().map(|(k, v)| format!("{}={}", k, v)).collect();
        writeln!(out, "# {}", meta.join(" ")).unwrap();
        let sizes: Vec<String> = self.vector_sizes.iter().map(|s| format!("s{}", s)).collect();
        writeln!(out, "{}\tmetric\t{}", self.row_kind, sizes.join("\t")).unwrap();
        for row in &self.row_labels {
            for (metric, pick) in [
                ("no_qos_min", 0usize),
                ("with_qos_min", 1),
                ("diff_no_pct", 2),
            ] {
                let mut line = format!("{}\t{}", row, metric);
                for size in &self.vector_sizes {
                    let cell = self.cell(row, *size);
                    let value = match (cell, pick) {
                        (Some(c), 0) => fmt_min(c.no_qos_min),
                        (Some(c), 1) => fmt_min(c.with_qos_min),
                        (Some(c), 2) => fmt_pct(c.diff_pct()),
                        _ => "NA".into(),
                    };
                    line.push('\t');
                    line.push_str(&value);
                }
                writeln!(out, "{}", line).unwrap();
            }
        }
        out
    }
}
