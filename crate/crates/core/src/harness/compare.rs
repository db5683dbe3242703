use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub runs: usize,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation over √runs; only for metrics seen in at
    /// least two runs.
    pub stderr: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    /// Union of all metric names, sorted.
    pub metrics: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// One row per label in order of first appearance; reports sharing a label
/// are repeated runs and are summarized by mean and standard error.
pub fn compare(reports: &[(String, BTreeMap<String, f64>)]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::Config("compare needs at least one report".into()));
    }
    let metrics: BTreeSet<String> = reports.iter().flat_map(|(_, m)| m.keys().cloned()).collect();
    let mut labels: Vec<&str> = Vec::new();
    for (l, _) in reports {
        if !labels.contains(&l.as_str()) {
            labels.push(l);
        }
    }
    let rows = labels
        .into_iter()
        .map(|label| {
            let group: Vec<_> = reports.iter().filter(|(l, _)| l == label).map(|(_, m)| m).collect();
            let mut mean = BTreeMap::new();
            let mut stderr = BTreeMap::new();
            for name in &metrics {
                let xs: Vec<f64> = group.iter().filter_map(|m| m.get(name).copied()).collect();
                if xs.is_empty() {
                    continue;
                }
                let n = xs.len() as f64;
                let mu = xs.iter().sum::<f64>() / n;
                mean.insert(name.clone(), mu);
                if xs.len() >= 2 {
                    let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0);
                    stderr.insert(name.clone(), (var / n).sqrt());
                }
            }
            ComparisonRow {
                label: label.to_string(),
                runs: group.len(),
                mean,
                stderr,
            }
        })
        .collect();
    Ok(ComparisonTable {
        metrics: metrics.into_iter().collect(),
        rows,
    })
}

impl ComparisonTable {
    /// `label,runs,<metric>,<metric>_stderr,...` with blanks for missing cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,runs");
        for m in &self.metrics {
            let _ = write!(s, ",{m},{m}_stderr");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.label, r.runs);
            for m in &self.metrics {
                let cell = |map: &BTreeMap<String, f64>| map.get(m).map(|v| v.to_string()).unwrap_or_default();
                let _ = write!(s, ",{},{}", cell(&r.mean), cell(&r.stderr));
            }
            s.push('\n');
        }
        s
    }
}
