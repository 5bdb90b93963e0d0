use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundReport;
use crate::metrics::MetricsReport;

pub const HEADER: [&str; 15] = [
    "strategy",
    "rounds",
    "epochs",
    "round_idx",
    "node_id",
    "ppv_low",
    "ppv_high",
    "tpr_low",
    "tpr_high",
    "iou_low",
    "iou_high",
    "acc",
    "acc_std",
    "comm_fraction",
    "seconds",
];

pub const GLOBAL: &str = "GLOBAL";

/// One line of `results.csv`. `acc_std` is only set on `GLOBAL` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub rounds: usize,
    pub epochs: usize,
    /// One-based.
    pub round_idx: usize,
    pub node_id: String,
    pub ppv_low: f64,
    pub ppv_high: f64,
    pub tpr_low: f64,
    pub tpr_high: f64,
    pub iou_low: f64,
    pub iou_high: f64,
    pub acc: f64,
    pub acc_std: Option<f64>,
    pub comm_fraction: f64,
    pub seconds: f64,
}

impl ResultRow {
    pub fn is_global(&self) -> bool {
        self.node_id == GLOBAL
    }
}

fn row(cell: (&str, usize, usize, usize), node_id: String, m: &MetricsReport, acc_std: Option<f64>, seconds: f64) -> ResultRow {
    let (strategy, rounds, epochs, round_idx) = cell;
    ResultRow {
        strategy: strategy.to_string(),
        rounds,
        epochs,
        round_idx,
        node_id,
        ppv_low: m.ppv[0],
        ppv_high: m.ppv[1],
        tpr_low: m.tpr[0],
        tpr_high: m.tpr[1],
        iou_low: m.iou[0],
        iou_high: m.iou[1],
        acc: m.acc,
        acc_std,
        comm_fraction: m.comm_fraction,
        seconds,
    }
}

/// Node rows followed by the `GLOBAL` row for every evaluated round.
pub fn rows_for(strategy: &str, rounds: usize, epochs: usize, reports: &[RoundReport], record_time: bool) -> Vec<ResultRow> {
    let mut out = Vec::new();
    for r in reports {
        let (Some(nodes), Some(global)) = (&r.node_metrics, &r.global) else { continue };
        let seconds = if record_time { r.seconds } else { 0.0 };
        let cell = (strategy, rounds, epochs, r.round + 1);
        for (i, m) in nodes.iter().enumerate() {
            out.push(row(cell, i.to_string(), m, None, seconds));
        }
        out.push(row(cell, GLOBAL.to_string(), &global.mean, Some(global.acc_std), seconds));
    }
    out
}

/// Appends `rows`, writing the header to a new or empty file and refusing
/// files whose header differs.
pub fn append(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let header = HEADER.join(",");
    let mut needs_header = true;
    if path.exists() {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut first = String::new();
        BufReader::new(file).read_line(&mut first).map_err(|e| Error::io(path, e))?;
        let first = first.trim_end_matches(['\n', '\r']);
        if !first.is_empty() {
            if first != header {
                return Err(Error::Format(format!(
                    "{} has a different schema; expected header `{header}`, found `{first}`",
                    path.display()
                )));
            }
            needs_header = false;
        }
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if needs_header {
        w.write_record(HEADER).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<ResultRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::Format(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("results CSV: {e}"))
}
