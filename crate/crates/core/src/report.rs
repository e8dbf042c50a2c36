//! Plain-text tables for aggregates and grid searches.

use crate::system::SystemKind;
use crate::training::{Aggregate, GridReport, METRIC_NAMES};

fn label(metric: &str) -> &str {
    match metric {
        "annotator_f1" => "annotator-level F1",
        "global_f1" => "global F1",
        "global_accuracy" => "accuracy",
        "disagreement_corr" => "disagreement corr.",
        other => other,
    }
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let pad = widths[c] - s.chars().count();
                if c == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Metrics as rows, one column per system (in canonical system order),
/// cells `mean ± std` in percent; absent metrics print `NA`.
pub fn render_comparison(aggregates: &[Aggregate]) -> String {
    let mut present: Vec<&Aggregate> = aggregates.iter().collect();
    present.sort_by_key(|a| SystemKind::ALL.iter().position(|k| *k == a.system));
    let mut rows = vec![std::iter::once("metric".to_string())
        .chain(present.iter().map(|a| a.system.name().to_string()))
        .collect::<Vec<_>>()];
    for metric in METRIC_NAMES {
        let mut row = vec![label(metric).to_string()];
        for a in &present {
            row.push(match a.test.get(metric) {
                Some(s) if metric == "disagreement_corr" => format!("{:.3} ± {:.3}", s.mean, s.std),
                Some(s) => format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std),
                None => "NA".into(),
            });
        }
        rows.push(row);
    }
    let mut row = vec!["trainable params".to_string()];
    row.extend(present.iter().map(|a| a.trainable_params.to_string()));
    rows.push(row);
    render(&rows)
}

/// Dev micro-F1 per (dropout, learning rate) cell; the selected cell is
/// marked with `*`.
pub fn render_grid(report: &GridReport) -> String {
    let mut lrs: Vec<f64> = Vec::new();
    let mut dropouts: Vec<f64> = Vec::new();
    for c in &report.cells {
        if !lrs.contains(&c.learning_rate) {
            lrs.push(c.learning_rate);
        }
        if !dropouts.contains(&c.dropout_p) {
            dropouts.push(c.dropout_p);
        }
    }
    let mut rows = vec![std::iter::once("dropout \\ lr".to_string())
        .chain(lrs.iter().map(|l| format!("{l:e}")))
        .collect::<Vec<_>>()];
    for &d in &dropouts {
        let mut row = vec![format!("{d}")];
        for &l in &lrs {
            let cell = report
                .cells
                .iter()
                .position(|c| c.dropout_p == d && c.learning_rate == l);
            row.push(match cell {
                Some(i) => format!(
                    "{}{:.4}",
                    if i == report.selected { "*" } else { "" },
                    report.cells[i].dev_micro_f1
                ),
                None => "-".into(),
            });
        }
        rows.push(row);
    }
    let mut out = render(&rows);
    let s = &report.cells[report.selected];
    out.push_str(&format!(
        "selected: dropout {} lr {:e} (dev micro-F1 {:.4})\n",
        s.dropout_p, s.learning_rate, s.dev_micro_f1
    ));
    out
}
