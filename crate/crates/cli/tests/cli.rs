use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use debias_core::experiment::{metric_row, CellResult};
use serde_json::Value;

const SPEC: &str = r#"
[dataset]
kind = "synthetic"
dim_core = 2
dim_spurious = 2

[dataset.spec]
num_classes = 2
num_attributes = 2
counts = [[120, 30], [30, 120]]
core_separation = 3.0
spurious_strength = 3.0
noise_sigma = 1.0
hard_fraction = 0.1

[eval]
bias_conflicting = ["y0_a1", "y1_a0"]

[eval.som]
height = 3
width = 3
epochs = 2
alpha0 = 0.5
sigma0 = 1.5
"#;

fn method(id: &str, extra: &str) -> String {
    format!("\n[[methods]]\nid = \"{id}\"\n[methods.config]\nepochs = 3\nbatch_size = 32\nper_group_finetune = 10\nfinetune_epochs = 3\n{extra}\n")
}

fn write_config(dir: &Path, seeds: &str, methods: &str) -> PathBuf {
    let text = format!("output_dir = \"out\"\nseeds = {seeds}\n{methods}{SPEC}");
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn debias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debias"))
        .args(args)
        .env_remove("DEBIAS_OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn run(config: &Path) -> Output {
    debias(&["run", config.to_str().unwrap()])
}

fn read_csv(path: &Path) -> Vec<Vec<(String, String)>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_owned).collect();
    r.records()
        .map(|rec| {
            header
                .iter()
                .cloned()
                .zip(rec.unwrap().iter().map(str::to_owned))
                .collect()
        })
        .collect()
}

fn csv_from_str(text: &str) -> Vec<Vec<(String, String)>> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    std::fs::write(&p, text).unwrap();
    read_csv(&p)
}

fn get<'a>(row: &'a [(String, String)], key: &str) -> &'a str {
    &row.iter().find(|(k, _)| k == key).unwrap().1
}

fn record(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("record.json")).unwrap()).unwrap()
}

#[test]
fn single_cell_writes_one_checkpoint_and_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[7]", &method("erm", ""));
    let out = run(&cfg);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let base = dir.path().join("out");
    let cell = base.join("cells/erm/seed-7");
    for f in ["cell.json", "trajectory.jsonl", "checkpoint.json"] {
        assert!(cell.join(f).is_file(), "{f}");
    }
    let rows = read_csv(&base.join("summary.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(get(&rows[0], "method"), "erm");
    assert_eq!(get(&rows[0], "seed"), "7");
    let ckpt: Value =
        serde_json::from_str(&std::fs::read_to_string(cell.join("checkpoint.json")).unwrap())
            .unwrap();
    assert_eq!(ckpt["method"], "erm");
    assert_eq!(ckpt["seed"], 7);
    assert!(record(&base)["average_over"]
        .as_str()
        .unwrap()
        .starts_with("subgroups"));
}

#[test]
fn aggregates_match_direct_computation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[0, 1, 2]", &method("gdro_adj", ""));
    assert!(run(&cfg).status.success());
    let base = dir.path().join("out");
    let rows = read_csv(&base.join("summary.csv"));
    assert_eq!(rows.len(), 3);
    let rec = record(&base);
    let cols = rec["aggregates"][0]["columns"].as_array().unwrap();
    for col in ["worst", "average", "purity", "delta_avg_worst"] {
        let vals: Vec<f64> = rows.iter().map(|r| get(r, col).parse().unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / 3.0;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        let agg = cols.iter().find(|c| c["column"] == col).unwrap();
        assert!(
            (agg["mean"].as_f64().unwrap() - mean).abs() < 1e-12,
            "{col}"
        );
        assert!((agg["std"].as_f64().unwrap() - std).abs() < 1e-12, "{col}");
        assert_eq!(agg["n"], 3);
    }
}

#[test]
fn summary_is_rebuilt_from_cell_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[0, 1]",
        &(method("erm", "") + &method("dann", "")),
    );
    assert!(run(&cfg).status.success());
    let base = dir.path().join("out");
    let rows = read_csv(&base.join("summary.csv"));
    assert_eq!(rows.len(), 4);
    for row in &rows {
        let cell_path = base.join(format!(
            "cells/{}/seed-{}/cell.json",
            get(row, "method"),
            get(row, "seed")
        ));
        let cell: Value =
            serde_json::from_str(&std::fs::read_to_string(cell_path).unwrap()).unwrap();
        let result: CellResult = serde_json::from_value(cell["result"].clone()).unwrap();
        let names: Vec<String> = serde_json::from_value(cell["group_names"].clone()).unwrap();
        let rebuilt = metric_row(&result, &names);
        for (k, v) in &rebuilt {
            assert_eq!(get(row, k), v, "{k}");
        }
    }
}

#[test]
fn rerun_skips_completed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[0]", &method("erm", ""));
    assert!(run(&cfg).status.success());
    let cell = dir.path().join("out/cells/erm/seed-0/cell.json");
    let before = std::fs::read(&cell).unwrap();
    let mtime = std::fs::metadata(&cell).unwrap().modified().unwrap();
    let out = run(&cfg);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("computed 0, skipped 1"));
    assert_eq!(std::fs::read(&cell).unwrap(), before);
    assert_eq!(std::fs::metadata(&cell).unwrap().modified().unwrap(), mtime);

    // a changed method config invalidates the cell
    let cfg = write_config(dir.path(), "[0]", &method("erm", "lr = 0.05"));
    let out = run(&cfg);
    assert!(String::from_utf8_lossy(&out.stdout).contains("computed 1, skipped 0"));
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let methods = method("proposed", "");
    assert!(run(&write_config(a.path(), "[3]", &methods))
        .status
        .success());
    assert!(run(&write_config(b.path(), "[3]", &methods))
        .status
        .success());
    for f in [
        "cells/proposed/seed-3/checkpoint.json",
        "cells/proposed/seed-3/trajectory.jsonl",
        "summary.csv",
    ] {
        assert_eq!(
            std::fs::read(a.path().join("out").join(f)).unwrap(),
            std::fs::read(b.path().join("out").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn unknown_method_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[0]",
        &(method("erm", "") + &method("magic_fix", "")),
    );
    let out = run(&cfg);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("magic_fix") && err.contains("methods[1].id"),
        "{err}"
    );
    assert!(!dir.path().join("out").exists());
}

#[test]
fn validation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("[]", method("erm", ""), "seeds"),
        ("[0]", method("erm", "lr = -1.0"), "lr"),
        ("[0]", method("erm", "typo_field = 1"), "typo_field"),
    ];
    for (seeds, methods, needle) in cases {
        let out = run(&write_config(dir.path(), seeds, &methods));
        assert_eq!(out.status.code(), Some(1), "{needle}");
        assert!(
            String::from_utf8_lossy(&out.stderr).contains(needle),
            "{needle}"
        );
    }
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        format!(
            "output_dir = \"o\"\nseeds = [0]\n{}{}",
            method("erm", ""),
            SPEC.replace("[\"y0_a1\", \"y1_a0\"]", "[\"nobody\"]")
        ),
    )
    .unwrap();
    let out = run(&path);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nobody"));
}

#[test]
fn diverging_cell_is_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[0]",
        &(method("erm", "") + &method("iw", "lr = 1e12")),
    );
    let out = run(&cfg);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let base = dir.path().join("out");
    assert!(base.join("cells/iw/seed-0/failed.json").is_file());
    assert!(base.join("cells/erm/seed-0/cell.json").is_file());
    let rec = record(&base);
    let statuses: Vec<&str> = rec["cells"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["status"].as_str().unwrap())
        .collect();
    assert_eq!(statuses, vec!["ok", "failed"]);
    assert_eq!(read_csv(&base.join("summary.csv")).len(), 1);
}

#[test]
fn env_overrides_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let other = dir.path().join("elsewhere");
    let cfg = write_config(dir.path(), "[0]", &method("erm", ""));
    let out = Command::new(env!("CARGO_BIN_EXE_debias"))
        .args(["run", cfg.to_str().unwrap()])
        .env("DEBIAS_OUTPUT_DIR", &other)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(other.join("record.json").is_file());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn compare_passes_single_record_through() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[0, 1]",
        &(method("erm", "") + &method("gdro", "")),
    );
    assert!(run(&cfg).status.success());
    let base = dir.path().join("out");
    let out = debias(&["compare", base.to_str().unwrap()]);
    assert!(out.status.success());
    let rows = csv_from_str(&String::from_utf8(out.stdout).unwrap());
    let rec = record(&base);
    assert_eq!(rows.len(), 2);
    for (row, agg) in rows.iter().zip(rec["aggregates"].as_array().unwrap()) {
        assert_eq!(get(row, "method"), agg["method"].as_str().unwrap());
        for c in agg["columns"].as_array().unwrap() {
            let col = c["column"].as_str().unwrap();
            assert_eq!(
                get(row, col).parse::<f64>().unwrap(),
                c["mean"].as_f64().unwrap()
            );
            assert_eq!(
                get(row, &format!("{col}_std")).parse::<f64>().unwrap(),
                c["std"].as_f64().unwrap()
            );
        }
    }
}

#[test]
fn compare_flags_larger_worst_group_value() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    // a barely trained model against a trained one
    assert!(run(&write_config(
        a.path(),
        "[0]",
        &method("erm", "lr = 0.0001")
    ))
    .status
    .success());
    assert!(run(&write_config(b.path(), "[0]", &method("gdro_adj", "")))
        .status
        .success());
    let out = debias(&[
        "compare",
        a.path().join("out").to_str().unwrap(),
        b.path().join("out/record.json").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let rows = csv_from_str(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 2);
    let worst: Vec<f64> = rows
        .iter()
        .map(|r| get(r, "worst").parse().unwrap())
        .collect();
    let winner = if worst[0] > worst[1] { 0 } else { 1 };
    assert_ne!(worst[0], worst[1]);
    let flags = |k: usize| -> Vec<String> {
        get(&rows[k], "best")
            .split(';')
            .map(str::to_owned)
            .collect()
    };
    assert!(flags(winner).contains(&"worst".to_owned()));
    assert!(!flags(1 - winner).contains(&"worst".to_owned()));
}

#[test]
fn compare_takes_union_of_columns() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run(&write_config(a.path(), "[0]", &method("erm", "")))
        .status
        .success());
    // the domain head adds probe columns
    assert!(run(&write_config(b.path(), "[0]", &method("dann", "")))
        .status
        .success());
    let out = debias(&[
        "compare",
        a.path().join("out").to_str().unwrap(),
        b.path().join("out").to_str().unwrap(),
    ]);
    let rows = csv_from_str(&String::from_utf8(out.stdout).unwrap());
    let keys: Vec<&str> = rows[0].iter().map(|(k, _)| k.as_str()).collect();
    assert!(keys.contains(&"domain_acc:y0_a0"));
    assert_eq!(get(&rows[0], "domain_acc:y0_a0"), "");
    assert_ne!(get(&rows[1], "domain_acc:y0_a0"), "");
}

#[test]
fn plot_data_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[0]",
        &(method("gdro", "") + &method("dann", "")),
    );
    assert!(run(&cfg).status.success());
    let base = dir.path().join("out");
    let plot = |kind: &str| -> Value {
        let out = debias(&["plot-data", base.to_str().unwrap(), "--kind", kind]);
        assert!(out.status.success(), "{kind}");
        serde_json::from_slice(&out.stdout).unwrap()
    };

    let w = plot("weights");
    let series = w["series"].as_array().unwrap();
    assert_eq!(series.len(), 1);
    assert_eq!(series[0]["method"], "gdro");
    for p in series[0]["points"].as_array().unwrap() {
        let s: f64 = p["values"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    let d = plot("domain_acc");
    assert_eq!(d["series"][0]["method"], "dann");
    assert_eq!(d["series"][0]["points"].as_array().unwrap().len(), 3);

    let l = plot("losses");
    assert_eq!(l["series"].as_array().unwrap().len(), 2);

    let s = plot("som");
    let cell: Value = serde_json::from_str(
        &std::fs::read_to_string(base.join("cells/gdro/seed-0/cell.json")).unwrap(),
    )
    .unwrap();
    let purity = &cell["result"]["purity"];
    let entry = &s["series"][0];
    assert_eq!(entry["height"], 3);
    let nodes = entry["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 3);
    for (r, row) in nodes.iter().enumerate() {
        for (c, node) in row.as_array().unwrap().iter().enumerate() {
            assert_eq!(node["purity"], purity["per_node_purity"][r * 3 + c]);
        }
    }
    assert_eq!(entry["overall_purity"], purity["overall_purity"]);

    let out = debias(&["plot-data", base.to_str().unwrap(), "--kind", "histogram"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn csv_dataset_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("f0,f1,label,attribute\n");
    for i in 0..200 {
        let (y, a) = (i % 2, (i / 2) % 2);
        let x = if y == 1 { 2.0 } else { -2.0 } + (i as f64 * 0.37).sin();
        text.push_str(&format!(
            "{x},{},{y},{a}\n",
            a as f64 + (i as f64 * 0.11).cos()
        ));
    }
    std::fs::write(dir.path().join("data.csv"), text).unwrap();
    let cfg = format!(
        "output_dir = \"out\"\nseeds = [0]\n{}\n[dataset]\nkind = \"csv\"\npath = \"data.csv\"\n\n[split]\nfractions = [0.5, 0.25, 0.25]\n",
        method("erm", "")
    );
    let path = dir.path().join("csv.toml");
    std::fs::write(&path, cfg).unwrap();
    let out = run(&path);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = read_csv(&dir.path().join("out/summary.csv"));
    assert!(get(&rows[0], "worst").parse::<f64>().unwrap() > 0.8);
}

#[test]
fn check_flag_only_validates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[0, 1]", &method("erm", ""));
    let out = debias(&["run", cfg.to_str().unwrap(), "--check"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok: 1 methods"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let out = debias(&["run", path.to_str().unwrap(), "--check"]);
        assert!(
            out.status.success(),
            "{}: {}",
            path.display(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
