use std::fmt::Write;

use super::results::ResultRow;
use crate::error::{Error, Result};
use crate::metrics::mean_std;

const COLUMNS: [&str; 8] = ["PPV low", "PPV high", "TPR low", "TPR high", "IoU low", "IoU high", "ACC", "Comm."];

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn with_spread(mean: f64, spread: Option<f64>) -> String {
    match spread {
        Some(s) => format!("{} ± {}", pct(mean), pct(s)),
        None => pct(mean),
    }
}

/// Final-round results as markdown: one table per `(rounds, epochs)` cell,
/// one line per strategy, percentages with one decimal. IoU and ACC carry
/// the inter-node spread when more than one node reported.
pub fn render(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Format("results CSV contains no rows; run an experiment first".into()));
    }
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for r in rows {
        if !groups.contains(&(r.rounds, r.epochs)) {
            groups.push((r.rounds, r.epochs));
        }
    }
    let mut out = String::new();
    for (rounds, epochs) in groups {
        let cell: Vec<&ResultRow> = rows.iter().filter(|r| (r.rounds, r.epochs) == (rounds, epochs)).collect();
        let mut strategies: Vec<&str> = Vec::new();
        for r in &cell {
            if !strategies.contains(&r.strategy.as_str()) {
                strategies.push(&r.strategy);
            }
        }
        let _ = writeln!(out, "### {rounds} rounds × {epochs} epochs\n");
        let _ = writeln!(out, "| Strategy | {} |", COLUMNS.join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(COLUMNS.len()));
        for s in strategies {
            let runs: Vec<&&ResultRow> = cell.iter().filter(|r| r.strategy == s).collect();
            let last = runs.iter().map(|r| r.round_idx).max().unwrap_or(0);
            let at_last: Vec<&ResultRow> = runs.iter().filter(|r| r.round_idx == last).map(|r| **r).collect();
            let Some(global) = at_last.iter().find(|r| r.is_global()) else {
                return Err(Error::Format(format!("{s} ({rounds}×{epochs}): no GLOBAL row for round {last}")));
            };
            let nodes: Vec<&ResultRow> = at_last.iter().filter(|r| !r.is_global()).copied().collect();
            let spread = |f: fn(&ResultRow) -> f64| {
                (nodes.len() > 1).then(|| mean_std(&nodes.iter().map(|r| f(r)).collect::<Vec<_>>()).1)
            };
            let acc_spread = if nodes.len() > 1 { global.acc_std.or_else(|| spread(|r| r.acc)) } else { None };
            let cells = [
                pct(global.ppv_low),
                pct(global.ppv_high),
                pct(global.tpr_low),
                pct(global.tpr_high),
                with_spread(global.iou_low, spread(|r| r.iou_low)),
                with_spread(global.iou_high, spread(|r| r.iou_high)),
                with_spread(global.acc, acc_spread),
                pct(global.comm_fraction),
            ];
            let _ = writeln!(out, "| {s} | {} |", cells.join(" | "));
        }
        out.push('\n');
    }
    Ok(out)
}
