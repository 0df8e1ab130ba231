use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use debias_core::experiment::{metric_row, run_cell, CellResult};
use debias_core::methods::{Method, MethodConfig};

use crate::config::{Plan, RunConfig};

pub const RECORD_FILE: &str = "record.json";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Contents of `cell.json`. Its presence marks the cell complete.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFile {
    pub method: Method,
    pub seed: u64,
    /// Everything that determines the cell's outcome; a mismatch on rerun
    /// means the cell is recomputed.
    pub snapshot: serde_json::Value,
    pub group_names: Vec<String>,
    pub result: CellResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellEntry {
    pub method: Method,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Paths relative to the record's directory.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub column: String,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub columns: Vec<Aggregate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    /// How `average` columns are formed.
    pub average_over: String,
    pub config: RunConfig,
    pub group_names: Vec<String>,
    pub cells: Vec<CellEntry>,
    pub aggregates: Vec<MethodAggregate>,
}

impl RunRecord {
    /// Accepts the record file itself or the run directory holding it.
    pub fn load(path: &Path) -> Result<(RunRecord, PathBuf)> {
        let file = if path.is_dir() {
            path.join(RECORD_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file)
            .with_context(|| format!("reading record {}", file.display()))?;
        let record = serde_json::from_str(&text)
            .with_context(|| format!("parsing record {}", file.display()))?;
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((record, dir))
    }

    pub fn load_cell(dir: &Path, entry: &CellEntry) -> Result<CellFile> {
        let path = dir.join(&entry.dir).join("cell.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Write through a sibling temp file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn cell_dir(method: Method, seed: u64) -> PathBuf {
    PathBuf::from("cells")
        .join(method.as_str())
        .join(format!("seed-{seed}"))
}

fn snapshot(plan: &Plan, cfg: &MethodConfig) -> serde_json::Value {
    serde_json::json!({
        "dataset": plan.config.dataset,
        "split": plan.config.split,
        "eval": plan.eval,
        "group_names": plan.group_names,
        "method_config": cfg,
    })
}

fn load_completed(path: &Path, snapshot: &serde_json::Value) -> Option<CellFile> {
    let text = std::fs::read_to_string(path).ok()?;
    let cell: CellFile = serde_json::from_str(&text).ok()?;
    (cell.snapshot == *snapshot).then_some(cell)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Columns of a metric row that are identifiers rather than measurements.
const NOT_AGGREGATED: &[&str] = &[
    "seed",
    "method",
    "metric",
    "worst_group",
    "encoder_checksum",
];

pub fn aggregate(rows: &[Vec<(String, String)>]) -> Vec<Aggregate> {
    let mut columns: Vec<String> = Vec::new();
    for row in rows {
        for (k, _) in row {
            if !NOT_AGGREGATED.contains(&k.as_str()) && !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    columns
        .into_iter()
        .filter_map(|col| {
            let vals: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.iter().find(|(k, _)| *k == col))
                .filter_map(|(_, v)| v.parse().ok())
                .collect();
            if vals.is_empty() {
                return None;
            }
            let (mean, std) = mean_std(&vals);
            Some(Aggregate {
                column: col,
                mean,
                std,
                n: vals.len(),
            })
        })
        .collect()
}

struct Progress {
    entries: Vec<Option<CellEntry>>,
    results: Vec<Option<CellResult>>,
}

fn build_record(plan: &Plan, progress: &Progress) -> RunRecord {
    let cells: Vec<CellEntry> = progress.entries.iter().flatten().cloned().collect();
    let aggregates = plan
        .methods
        .iter()
        .map(|(m, _)| {
            let rows: Vec<Vec<(String, String)>> = progress
                .results
                .iter()
                .flatten()
                .filter(|r| r.method == *m)
                .map(|r| metric_row(r, &plan.group_names))
                .collect();
            MethodAggregate {
                method: *m,
                columns: aggregate(&rows),
            }
        })
        .collect();
    RunRecord {
        average_over: "subgroups: unweighted mean over present subgroups, not over samples".into(),
        config: plan.config.clone(),
        group_names: plan.group_names.clone(),
        cells,
        aggregates,
    }
}

fn write_record(plan: &Plan, progress: &Progress) -> Result<()> {
    let record = build_record(plan, progress);
    write_atomic(
        &plan.output_dir.join(RECORD_FILE),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )
}

pub fn write_summary(path: &Path, rows: &[Vec<(String, String)>]) -> Result<()> {
    let mut header: Vec<String> = Vec::new();
    for row in rows {
        for (k, _) in row {
            if !header.contains(k) {
                header.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for row in rows {
        w.write_record(header.iter().map(|h| {
            row.iter()
                .find(|(k, _)| k == h)
                .map(|(_, v)| v.as_str())
                .unwrap_or("")
        }))?;
    }
    write_atomic(path, &w.into_inner()?)
}

/// Outcome of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn run_one(
    plan: &Plan,
    method: Method,
    cfg: &MethodConfig,
    seed: u64,
    snap: serde_json::Value,
) -> Result<CellFile> {
    let (ds, splits) = plan.build(seed)?;
    let out = run_cell(&ds, &splits, method, cfg, &plan.eval, seed)?;
    let dir = plan.output_dir.join(cell_dir(method, seed));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(
        &dir.join("trajectory.jsonl"),
        out.trajectory.to_jsonl()?.as_bytes(),
    )?;
    write_atomic(
        &dir.join("checkpoint.json"),
        out.checkpoint.to_json()?.as_bytes(),
    )?;
    let cell = CellFile {
        method,
        seed,
        snapshot: snap,
        group_names: plan.group_names.clone(),
        result: out.result,
    };
    write_atomic(
        &dir.join("cell.json"),
        serde_json::to_string_pretty(&cell)?.as_bytes(),
    )?;
    let _ = std::fs::remove_file(dir.join("failed.json"));
    Ok(cell)
}

pub fn run(plan: &Plan) -> Result<RunSummary> {
    std::fs::create_dir_all(&plan.output_dir)
        .with_context(|| format!("creating {}", plan.output_dir.display()))?;
    let jobs: Vec<(Method, &MethodConfig, u64)> = plan
        .methods
        .iter()
        .flat_map(|(m, cfg)| plan.config.seeds.iter().map(move |&s| (*m, cfg, s)))
        .collect();
    let progress = Mutex::new(Progress {
        entries: vec![None; jobs.len()],
        results: vec![None; jobs.len()],
    });
    let counts = Mutex::new(RunSummary {
        computed: 0,
        skipped: 0,
        failed: 0,
    });

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.config.workers)
        .build()?;
    let outcome: Result<()> = pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .try_for_each(|(k, &(method, cfg, seed))| -> Result<()> {
                let rel = cell_dir(method, seed);
                let dir = plan.output_dir.join(&rel);
                let snap = snapshot(plan, cfg);
                let (entry, result) =
                    if let Some(cell) = load_completed(&dir.join("cell.json"), &snap) {
                        info!("{method} seed {seed}: already complete");
                        counts.lock().unwrap().skipped += 1;
                        (ok_entry(method, seed, rel), Some(cell.result))
                    } else {
                        info!("{method} seed {seed}: training");
                        match run_one(plan, method, cfg, seed, snap) {
                            Ok(cell) => {
                                counts.lock().unwrap().computed += 1;
                                (ok_entry(method, seed, rel), Some(cell.result))
                            }
                            Err(e) => {
                                warn!("{method} seed {seed}: failed: {e:#}");
                                counts.lock().unwrap().failed += 1;
                                std::fs::create_dir_all(&dir)?;
                                let msg = format!("{e:#}");
                                write_atomic(
                                    &dir.join("failed.json"),
                                    serde_json::to_string_pretty(&serde_json::json!({
                                        "method": method,
                                        "seed": seed,
                                        "error": msg,
                                    }))?
                                    .as_bytes(),
                                )?;
                                let entry = CellEntry {
                                    method,
                                    seed,
                                    status: CellStatus::Failed,
                                    error: Some(msg),
                                    dir: rel,
                                };
                                (entry, None)
                            }
                        }
                    };
                let mut p = progress.lock().unwrap();
                p.entries[k] = Some(entry);
                p.results[k] = result;
                write_record(plan, &p)
            })
    });
    outcome?;

    let p = progress.into_inner().unwrap();
    let rows: Vec<Vec<(String, String)>> = p
        .results
        .iter()
        .flatten()
        .map(|r| metric_row(r, &plan.group_names))
        .collect();
    write_summary(&plan.output_dir.join(SUMMARY_FILE), &rows)?;
    Ok(counts.into_inner().unwrap())
}

fn ok_entry(method: Method, seed: u64, dir: PathBuf) -> CellEntry {
    CellEntry {
        method,
        seed,
        status: CellStatus::Ok,
        error: None,
        dir,
    }
}
