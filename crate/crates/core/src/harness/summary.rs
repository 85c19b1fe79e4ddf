use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::experiment::ResultRecord;

/// Marker for a (method, target) cell without records, in CSV output.
pub const CSV_GAP: &str = "NA";
/// Same, in the text table.
pub const TEXT_GAP: &str = "--";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    WeightedAccuracy,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::WeightedAccuracy => "weighted_accuracy",
        }
    }

    fn of(self, r: &ResultRecord) -> f64 {
        match self {
            Metric::Accuracy => r.test_accuracy,
            Metric::WeightedAccuracy => r.test_weighted_accuracy,
        }
    }
}

/// Methods as rows, held-out targets as columns, plus the cross-target
/// average. A cell is the mean over seeds of each seed's mean over its
/// selected snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub metric: Metric,
    pub methods: Vec<String>,
    pub targets: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
    /// `None` whenever any target cell of the row is missing.
    pub average: Vec<Option<f64>>,
}

fn push_unique(list: &mut Vec<String>, item: &str) {
    if !list.iter().any(|x| x == item) {
        list.push(item.to_string());
    }
}

/// Builds the table. Rows and columns follow first appearance in
/// `records`; extra `targets` add columns even when no record covers them.
pub fn summarize(records: &[ResultRecord], metric: Metric, targets: &[String]) -> SummaryTable {
    let mut methods = Vec::new();
    let mut cols = Vec::new();
    for t in targets {
        push_unique(&mut cols, t);
    }
    // (method, target) -> seed -> values
    let mut grouped: BTreeMap<(&str, &str), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in records {
        push_unique(&mut methods, &r.method);
        push_unique(&mut cols, &r.target);
        grouped
            .entry((r.method.as_str(), r.target.as_str()))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(metric.of(r));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut cells = Vec::with_capacity(methods.len());
    let mut average = Vec::with_capacity(methods.len());
    for m in &methods {
        let row: Vec<Option<f64>> = cols
            .iter()
            .map(|t| {
                grouped.get(&(m.as_str(), t.as_str())).map(|by_seed| {
                    let per_seed: Vec<f64> = by_seed.values().map(|v| mean(v)).collect();
                    mean(&per_seed)
                })
            })
            .collect();
        let avg = row
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
            .map(|v| mean(&v));
        cells.push(row);
        average.push(avg);
    }
    SummaryTable {
        metric,
        methods,
        targets: cols,
        cells,
        average,
    }
}

impl SummaryTable {
    pub fn cell(&self, method: &str, target: &str) -> Option<f64> {
        let i = self.methods.iter().position(|m| m == method)?;
        let j = self.targets.iter().position(|t| t == target)?;
        self.cells[i][j]
    }

    pub fn average_of(&self, method: &str) -> Option<f64> {
        let i = self.methods.iter().position(|m| m == method)?;
        self.average[i]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for t in &self.targets {
            out.push(',');
            out.push_str(t);
        }
        out.push_str(",average\n");
        for (i, m) in self.methods.iter().enumerate() {
            out.push_str(m);
            for v in self.cells[i].iter().chain(std::iter::once(&self.average[i])) {
                out.push(',');
                match v {
                    Some(x) => write!(out, "{x}").unwrap(),
                    None => out.push_str(CSV_GAP),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Column-aligned table with values in percent.
    pub fn to_text(&self) -> String {
        let mut header = vec!["method".to_string()];
        header.extend(self.targets.iter().cloned());
        header.push("average".into());
        let mut rows = vec![header];
        for (i, m) in self.methods.iter().enumerate() {
            let mut row = vec![m.clone()];
            for v in self.cells[i].iter().chain(std::iter::once(&self.average[i])) {
                row.push(match v {
                    Some(x) => format!("{:.2}", 100.0 * x),
                    None => TEXT_GAP.to_string(),
                });
            }
            rows.push(row);
        }
        let ncol = rows[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("test {} (%)\n", self.metric.as_str());
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    if j == 0 {
                        format!("{s:<w$}", w = widths[j])
                    } else {
                        format!("{s:>w$}", w = widths[j])
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
