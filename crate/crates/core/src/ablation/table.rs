use serde::{Deserialize, Serialize};

use crate::eval::render_table;
use crate::util::median;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    /// A metric in [0, 1], shown as a percentage.
    Metric,
    /// A plain count.
    Count,
    /// A signed metric difference, shown in points.
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// `per_seed[s][c]`; `None` marks a failed or inapplicable cell.
    pub per_seed: Vec<Vec<Option<f64>>>,
    pub median: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

impl AblationRow {
    pub fn new(label: impl Into<String>, per_seed: Vec<Vec<Option<f64>>>, failures: Vec<String>) -> Self {
        let cols = per_seed.iter().map(Vec::len).max().unwrap_or(0);
        let median = (0..cols)
            .map(|c| {
                let vals: Vec<f64> = per_seed.iter().filter_map(|r| r.get(c).copied().flatten()).collect();
                (!vals.is_empty()).then(|| median(&vals))
            })
            .collect();
        AblationRow {
            label: label.into(),
            per_seed,
            median,
            failures,
        }
    }
}

/// One ablation's summary table; cells are medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub title: String,
    pub columns: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub rows: Vec<AblationRow>,
    pub notes: Vec<String>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Median cell by row label and column name.
    pub fn cell(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.row(row)?.median.get(c).copied().flatten()
    }

    pub fn failures(&self) -> impl Iterator<Item = (&str, &str)> {
        self.rows
            .iter()
            .flat_map(|r| r.failures.iter().map(move |f| (r.label.as_str(), f.as_str())))
    }

    pub fn render(&self) -> String {
        let mut header = vec![String::new()];
        header.extend(self.columns.iter().cloned());
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.label.clone()];
                line.extend(r.median.iter().zip(&self.kinds).map(|(v, k)| match (v, k) {
                    (None, _) if !r.failures.is_empty() => "FAIL".to_string(),
                    (None, _) => "-".to_string(),
                    (Some(v), ColumnKind::Metric) => format!("{:.2}", 100.0 * v),
                    (Some(v), ColumnKind::Delta) => format!("{:+.2}", 100.0 * v),
                    (Some(v), ColumnKind::Count) => format!("{v:.0}"),
                }));
                line
            })
            .collect();
        let mut out = format!("{}\n", self.title);
        out.push_str(&render_table(&header, &rows));
        for n in &self.notes {
            out.push_str(n);
            out.push('\n');
        }
        for (row, f) in self.failures() {
            out.push_str(&format!("FAILED {row}: {f}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians_skip_missing() {
        let r = AblationRow::new(
            "x",
            vec![vec![Some(0.1), None], vec![Some(0.3), Some(0.5)], vec![Some(0.2), None]],
            vec![],
        );
        assert_eq!(r.median, vec![Some(0.2), Some(0.5)]);
    }
}
