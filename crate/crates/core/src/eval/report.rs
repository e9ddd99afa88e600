use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::write_atomic;

/// One training regime's metrics across evaluation tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub regime: String,
    /// `Err` holds the per-cell error message.
    pub cells: Vec<std::result::Result<f64, String>>,
    pub average: Option<f64>,
}

impl TransferRow {
    pub fn new(regime: String, cells: Vec<std::result::Result<f64, String>>) -> Self {
        let ok: Vec<f64> = cells.iter().filter_map(|c| c.as_ref().ok().copied()).collect();
        let average = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        TransferRow {
            regime,
            cells,
            average,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub tasks: Vec<String>,
    pub rows: Vec<TransferRow>,
}

impl TransferMatrix {
    pub fn cell(&self, regime: &str, task: &str) -> Option<f64> {
        let r = self.rows.iter().find(|r| r.regime == regime)?;
        let t = self.tasks.iter().position(|t| t == task)?;
        r.cells[t].as_ref().ok().copied()
    }

    pub fn render(&self) -> String {
        let mut header = vec!["regime".to_string()];
        header.extend(self.tasks.iter().cloned());
        header.push("avg".into());
        let body = self
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.regime.clone()];
                line.extend(r.cells.iter().map(|c| match c {
                    Ok(v) => format!("{:.2}", 100.0 * v),
                    Err(_) => "ERR".into(),
                }));
                line.push(r.average.map_or("-".into(), |a| format!("{:.2}", 100.0 * a)));
                line
            })
            .collect::<Vec<_>>();
        let mut out = render_table(&header, &body);
        for r in &self.rows {
            for (t, c) in self.tasks.iter().zip(&r.cells) {
                if let Err(e) = c {
                    let _ = writeln!(out, "ERR {} / {}: {e}", r.regime, t);
                }
            }
        }
        out
    }
}

/// Mean gate weights by style id plus single-combiner probe metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub task: String,
    pub n_combiners: usize,
    pub per_style_mean_gate: BTreeMap<u32, Vec<f64>>,
    pub full_metric: f64,
    pub probe_metrics: Vec<f64>,
}

impl GateReport {
    pub fn is_degenerate(&self) -> bool {
        self.n_combiners == 1
    }

    pub fn render(&self) -> String {
        let mut out = format!("gate report: {} ({} combiners)\n", self.task, self.n_combiners);
        if self.is_degenerate() {
            out.push_str("single combiner: gate is constant 1.0, probe equals the full model\n");
        }
        let header = vec!["path".to_string(), "metric".into()];
        let mut rows = vec![vec!["gated".to_string(), format!("{:.2}", 100.0 * self.full_metric)]];
        for (i, m) in self.probe_metrics.iter().enumerate() {
            rows.push(vec![format!("combiner {i}"), format!("{:.2}", 100.0 * m)]);
        }
        out.push_str(&render_table(&header, &rows));
        let mut header = vec!["style".to_string()];
        header.extend((0..self.n_combiners).map(|i| format!("g{i}")));
        let rows: Vec<Vec<String>> = self
            .per_style_mean_gate
            .iter()
            .map(|(s, w)| {
                let mut r = vec![s.to_string()];
                r.extend(w.iter().map(|x| format!("{x:.4}")));
                r
            })
            .collect();
        out.push_str(&render_table(&header, &rows));
        out
    }
}

/// Left-aligned first column, right-aligned rest.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate().take(cols) {
            if i == 0 {
                let _ = write!(s, "{c:<w$}", w = widths[0]);
            } else {
                let _ = write!(s, "  {c:>w$}", w = widths[i]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// Writes `<stem>.txt` and its `<stem>.json` twin.
pub fn write_report<T: Serialize>(dir: &Path, stem: &str, text: &str, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join(format!("{stem}.txt")), text.as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())
}
