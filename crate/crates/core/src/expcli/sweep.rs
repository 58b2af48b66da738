//! Grid sweeps: one run per cell of a cross product, with a consolidated
//! table. Cells whose run directory is already complete are not re-run.

use std::path::{Path, PathBuf};

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expcli::config::{set_path, RunConfig};
use crate::expcli::run::{is_complete, load_result, run, run_dir};

/// Parameter paths (dotted, e.g. `cdcl.tau`) and the values each takes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub params: Vec<(String, Vec<Value>)>,
}

impl Grid {
    /// A JSON object mapping parameter paths to non-empty arrays.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(map) = value else {
            return Err(Error::config("grid", "must be a JSON object"));
        };
        let mut params = Vec::new();
        for (path, values) in map {
            match values {
                Value::Array(v) if !v.is_empty() => params.push((path, v)),
                _ => return Err(Error::config(format!("grid.{path}"), "must be a non-empty array")),
            }
        }
        Ok(Grid { params })
    }

    pub fn n_cells(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).product()
    }

    /// Cross product; the last parameter varies fastest.
    pub fn cells(&self) -> Vec<Vec<(String, Value)>> {
        let mut cells = vec![Vec::new()];
        for (path, values) in &self.params {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((path.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub params: Vec<(String, Value)>,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: Cell,
    pub dir: PathBuf,
    /// Target test accuracy and F1, or the failure message.
    pub outcome: std::result::Result<(Option<f64>, Option<f64>), String>,
    pub resumed: bool,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<CellOutcome>,
    pub csv_path: PathBuf,
}

/// Expands the grid over `base` and validates every resulting config up
/// front, so a bad grid fails before any training starts.
pub fn expand(base: &Value, grid: &Grid) -> Result<Vec<Cell>> {
    grid.cells()
        .into_iter()
        .map(|params| {
            let mut v = base.clone();
            for (path, value) in &params {
                set_path(&mut v, path, value.clone())?;
            }
            let config = RunConfig::from_value(v)?;
            Ok(Cell { params, config })
        })
        .collect()
}

fn argmax_flags(values: &[Option<f64>]) -> Vec<bool> {
    let best = values
        .iter()
        .flatten()
        .copied()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    let first = best.and_then(|b| values.iter().position(|v| *v == Some(b)));
    (0..values.len()).map(|i| Some(i) == first).collect()
}

fn csv_field(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn report_csv(grid: &Grid, cells: &[CellOutcome]) -> Result<String> {
    let accs: Vec<Option<f64>> = cells.iter().map(|c| c.outcome.as_ref().ok().and_then(|o| o.0)).collect();
    let f1s: Vec<Option<f64>> = cells.iter().map(|c| c.outcome.as_ref().ok().and_then(|o| o.1)).collect();
    let best_acc = argmax_flags(&accs);
    let best_f1 = argmax_flags(&f1s);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell".to_string()];
    header.extend(grid.params.iter().map(|(p, _)| p.clone()));
    header.extend(
        ["run", "status", "target_test_acc", "target_test_f1", "best_acc", "best_f1"].map(String::from),
    );
    w.write_record(&header)?;
    for (i, c) in cells.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(c.cell.params.iter().map(|(_, v)| csv_field(v)));
        rec.push(c.cell.config.run_name());
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        match &c.outcome {
            Ok((acc, f1)) => {
                rec.push("ok".into());
                rec.push(fmt(*acc));
                rec.push(fmt(*f1));
            }
            Err(e) => {
                rec.push(format!("failed: {e}"));
                rec.push(String::new());
                rec.push(String::new());
            }
        }
        rec.push(u8::from(best_acc[i]).to_string());
        rec.push(u8::from(best_f1[i]).to_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `sweep-<first 12 hex digits of sha256(base, grid)>.csv`.
pub fn report_name(base: &Value, grid: &Grid) -> String {
    let mut h = Sha256::new();
    h.update(base.to_string().as_bytes());
    for (p, v) in &grid.params {
        h.update(p.as_bytes());
        h.update(Value::Array(v.clone()).to_string().as_bytes());
    }
    format!("sweep-{}.csv", &hex::encode(h.finalize())[..12])
}

/// Runs every cell in order. Failures are recorded and the sweep moves on.
pub fn sweep(base: &Value, grid: &Grid, runs_dir: &Path) -> Result<SweepReport> {
    let cells = expand(base, grid)?;
    let mut outcomes = Vec::with_capacity(cells.len());
    for (i, cell) in cells.into_iter().enumerate() {
        let dir = run_dir(&cell.config, runs_dir);
        let resumed = is_complete(&dir);
        let outcome = if resumed {
            log::info!("cell {i}: {} already complete", dir.display());
            load_result(&dir).map(|r| (r.target_test.map(|m| m.accuracy), r.target_test.map(|m| m.f1)))
        } else {
            log::info!("cell {i}: running {}", cell.config.run_name());
            run(&cell.config, runs_dir).map(|o| (o.result.target_test.map(|m| m.accuracy), o.result.target_test.map(|m| m.f1)))
        }
        .map_err(|e| {
            log::warn!("cell {i} failed: {e}");
            e.to_string()
        });
        outcomes.push(CellOutcome {
            cell,
            dir,
            outcome,
            resumed,
        });
    }
    std::fs::create_dir_all(runs_dir)?;
    let csv_path = runs_dir.join(report_name(base, grid));
    std::fs::write(&csv_path, report_csv(grid, &outcomes)?)?;
    Ok(SweepReport {
        cells: outcomes,
        csv_path,
    })
}
