use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde_json::{json, Value};

use debias_core::methods::{Method, Stage};

use crate::run::{CellStatus, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Weights,
    Losses,
    #[value(name = "domain_acc")]
    DomainAcc,
    Som,
}

/// Which way is better for a column, if it is ranked at all.
fn direction(column: &str) -> Option<bool> {
    const HIGHER: &[&str] = &["average", "worst"];
    const LOWER: &[&str] = &["purity", "purity_unweighted"];
    if HIGHER.contains(&column) || column.starts_with("accuracy:") || column.starts_with("auc:") {
        Some(true)
    } else if LOWER.contains(&column) || column.starts_with("delta_") {
        Some(false)
    } else {
        None
    }
}

/// One row per `(record, method)` with mean and std of every aggregated
/// column, plus a `best` column naming the columns where the row is best.
pub fn compare(records: &[PathBuf]) -> Result<String> {
    if records.is_empty() {
        bail!("compare needs at least one record");
    }
    // (record label, method, [(column, mean, std)])
    type Row = (String, Method, Vec<(String, f64, f64)>);
    let mut rows: Vec<Row> = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for path in records {
        let (record, dir) = RunRecord::load(path)?;
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        for agg in record.aggregates {
            if agg.columns.is_empty() {
                continue;
            }
            for c in &agg.columns {
                if !columns.contains(&c.column) {
                    columns.push(c.column.clone());
                }
            }
            let vals = agg
                .columns
                .into_iter()
                .map(|c| (c.column, c.mean, c.std))
                .collect();
            rows.push((label.clone(), agg.method, vals));
        }
    }

    let lookup = |row: &[(String, f64, f64)], col: &str| {
        row.iter()
            .find(|(c, _, _)| c == col)
            .map(|(_, m, s)| (*m, *s))
    };
    let mut best: Vec<Vec<&str>> = vec![Vec::new(); rows.len()];
    for col in &columns {
        let Some(higher) = direction(col) else {
            continue;
        };
        let vals: Vec<Option<f64>> = rows
            .iter()
            .map(|r| lookup(&r.2, col).map(|v| v.0))
            .collect();
        let target = vals
            .iter()
            .flatten()
            .copied()
            .fold(None, |acc: Option<f64>, v| {
                Some(match acc {
                    None => v,
                    Some(a) if higher => a.max(v),
                    Some(a) => a.min(v),
                })
            });
        if let Some(t) = target {
            for (k, v) in vals.iter().enumerate() {
                if *v == Some(t) {
                    best[k].push(col);
                }
            }
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["record".to_owned(), "method".to_owned()];
    for c in &columns {
        header.push(c.clone());
        header.push(format!("{c}_std"));
    }
    header.push("best".to_owned());
    w.write_record(&header)?;
    for (k, (label, method, vals)) in rows.iter().enumerate() {
        let mut out = vec![label.clone(), method.to_string()];
        for c in &columns {
            match lookup(vals, c) {
                Some((m, s)) => {
                    out.push(m.to_string());
                    out.push(s.to_string());
                }
                None => {
                    out.push(String::new());
                    out.push(String::new());
                }
            }
        }
        out.push(best[k].join(";"));
        w.write_record(&out)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn stage_name(s: Stage) -> Value {
    serde_json::to_value(s).expect("stage serializes")
}

/// JSON series for external plotting, one entry per completed cell.
pub fn plot_data(
    record_path: &Path,
    kind: PlotKind,
    method: Option<Method>,
    seed: Option<u64>,
) -> Result<Value> {
    let (record, dir) = RunRecord::load(record_path)?;
    let mut series = Vec::new();
    for entry in &record.cells {
        if entry.status != CellStatus::Ok
            || method.is_some_and(|m| m != entry.method)
            || seed.is_some_and(|s| s != entry.seed)
        {
            continue;
        }
        let item = match kind {
            PlotKind::Som => {
                let cell = RunRecord::load_cell(&dir, entry)?;
                let grid = &cell.result.som.grid;
                let purity = &cell.result.purity;
                let nodes: Vec<Vec<Value>> = (0..grid.height)
                    .map(|r| {
                        (0..grid.width)
                            .map(|c| {
                                let n = r * grid.width + c;
                                json!({
                                    "count": cell.result.som.occupancy.counts[n].iter().sum::<usize>(),
                                    "majority": purity.per_node_majority[n].map(|g| record.group_names[g].clone()),
                                    "purity": purity.per_node_purity[n],
                                })
                            })
                            .collect()
                    })
                    .collect();
                json!({
                    "method": entry.method,
                    "seed": entry.seed,
                    "height": grid.height,
                    "width": grid.width,
                    "overall_purity": purity.overall_purity,
                    "unweighted_purity": purity.unweighted_purity,
                    "nodes": nodes,
                })
            }
            _ => {
                let path = dir.join(&entry.dir).join("trajectory.jsonl");
                let text = std::fs::read_to_string(&path)?;
                let epochs = debias_core::methods::Trajectory::from_jsonl(&text)?;
                let points: Vec<Value> = epochs
                    .iter()
                    .filter_map(|e| {
                        let values = match kind {
                            PlotKind::Weights => json!(e.group_weights.as_ref()?),
                            PlotKind::Losses => json!(e.group_losses),
                            PlotKind::DomainAcc => json!(e.domain_accuracy.as_ref()?),
                            PlotKind::Som => unreachable!(),
                        };
                        Some(json!({"stage": stage_name(e.stage), "epoch": e.epoch, "values": values}))
                    })
                    .collect();
                if points.is_empty() {
                    continue;
                }
                json!({"method": entry.method, "seed": entry.seed, "points": points})
            }
        };
        series.push(item);
    }
    let kind_name = match kind {
        PlotKind::Weights => "weights",
        PlotKind::Losses => "losses",
        PlotKind::DomainAcc => "domain_acc",
        PlotKind::Som => "som",
    };
    Ok(json!({
        "kind": kind_name,
        "group_names": record.group_names,
        "series": series,
    }))
}
