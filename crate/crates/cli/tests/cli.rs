use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_didforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn didforge")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        .unwrap()
}

fn simulate(dir: &Path, preset: &str, n: usize, seed: u64) -> PathBuf {
    let out = run(&[
        "simulate",
        "--preset",
        preset,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out-dir",
        path(dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    dir.join("panel.csv")
}

fn error_kind(out: &Output) -> String {
    let v: Value = serde_json::from_slice(out.stderr.trim_ascii()).expect("json error report");
    v["error"].as_str().unwrap().to_string()
}

const COVS: [&str; 4] = ["--xvars", "x1", "--zvars", "z1"];

#[test]
fn simulate_writes_three_files_and_estimate_reads_them() {
    let tmp = TempDir::new().unwrap();
    let panel = simulate(tmp.path(), "clean", 4000, 1);
    for f in ["panel.csv", "oracle.json", "dgp_config.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let est = tmp.path().join("est");
    let mut args = vec![
        "estimate",
        "--input",
        path(&panel),
        "--out-dir",
        path(&est),
        "--bootstrap-draws",
        "499",
    ];
    args.extend(COVS);
    let out = run(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = json(est.join("att_gt.json"));
    // cohorts 2, 3, 4 over four periods
    assert_eq!(rows.as_array().unwrap().len(), 3 + 2 + 1);
    assert!(est.join("att_gt.csv").exists() && est.join("run_meta.json").exists());

    let agg = json(est.join("aggregates.json"));
    let oracle = json(tmp.path().join("oracle.json"));
    let truth = oracle["overall"]["value"].as_f64().unwrap();
    let (e, se) = (
        agg["overall"]["estimate"].as_f64().unwrap(),
        agg["overall"]["se"].as_f64().unwrap(),
    );
    assert!((e - truth).abs() < 3.0 * se, "{e} {se} {truth}");
    assert_eq!(agg["event_study"].as_array().unwrap().len(), 3);
}

#[test]
fn estimate_is_byte_identical_across_runs_and_thread_caps() {
    let tmp = TempDir::new().unwrap();
    let panel = simulate(tmp.path(), "heterogeneous_att", 600, 3);
    let mut outputs = Vec::new();
    for (k, threads) in ["", "1", ""].iter().enumerate() {
        let out_dir = tmp.path().join(format!("run{k}"));
        let mut cmd = bin();
        cmd.args([
            "estimate",
            "--input",
            path(&panel),
            "--method",
            "dr",
            "--bootstrap-draws",
            "999",
            "--seed",
            "7",
        ]);
        cmd.args(COVS).args(["--out-dir", path(&out_dir)]);
        if !threads.is_empty() {
            cmd.env("DIDFORGE_THREADS", threads);
        }
        let out = cmd.output().unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let files: Vec<Vec<u8>> = [
            "att_gt.json",
            "aggregates.json",
            "run_meta.json",
            "att_gt.csv",
        ]
        .iter()
        .map(|f| fs::read(out_dir.join(f)).unwrap())
        .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn missing_cell_exits_with_validation_code() {
    let tmp = TempDir::new().unwrap();
    let panel = simulate(tmp.path(), "clean", 50, 2);
    let text = fs::read_to_string(&panel).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.remove(3);
    fs::write(&panel, lines.join("\n")).unwrap();
    let out = run(&[
        "estimate",
        "--input",
        path(&panel),
        "--out-dir",
        path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "MissingCell");
}

#[test]
fn collinear_covariates_exit_with_numerical_code() {
    let tmp = TempDir::new().unwrap();
    let panel = simulate(tmp.path(), "violate_B_levels", 200, 2);
    let text = fs::read_to_string(&panel).unwrap();
    let doubled: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("{l},x2")
            } else {
                let x1: f64 = l.split(',').nth(4).unwrap().parse().unwrap();
                format!("{l},{}", 2.0 * x1)
            }
        })
        .collect();
    fs::write(&panel, doubled.join("\n")).unwrap();
    let out = run(&[
        "decompose",
        "--input",
        path(&panel),
        "--xvars",
        "x1,x2",
        "--out-dir",
        path(tmp.path()),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(error_kind(&out), "RankDeficient");
}

#[test]
fn bad_flags_and_presets_exit_with_validation_code() {
    assert_eq!(run(&["estimate", "--bogus"]).status.code(), Some(2));
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "simulate",
        "--preset",
        "nope",
        "--out-dir",
        path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "UnknownPreset");
    let panel = simulate(tmp.path(), "clean", 100, 1);
    let out = run(&[
        "estimate",
        "--input",
        path(&panel),
        "--bootstrap-draws",
        "50",
        "--out-dir",
        path(tmp.path()),
    ]);
    assert_eq!(error_kind(&out), "TooFewDraws");
}

#[test]
fn decompose_reconstructs_alpha_and_counts_negative_weights() {
    let tmp = TempDir::new().unwrap();
    let panel = simulate(tmp.path(), "negative_weights", 2000, 5);
    let out_dir = tmp.path().join("dec");
    let mut args = vec![
        "decompose",
        "--input",
        path(&panel),
        "--out-dir",
        path(&out_dir),
    ];
    args.extend(COVS);
    let out = run(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let d = json(out_dir.join("decomposition.json"));
    assert!(d["reconstruction_error"].as_f64().unwrap() <= 1e-8);
    assert!(d["census"]["share_negative"].as_f64().unwrap() > 0.0);
    let twfe = json(out_dir.join("twfe.json"));
    assert_eq!(twfe["alpha"], d["alpha"]);
    let weights = fs::read_to_string(out_dir.join("weights.csv")).unwrap();
    for v in [
        "two_period_conditional_att",
        "two_period_implicit",
        "multi_period_conditional_att",
        "multi_period_implicit",
    ] {
        assert!(weights.contains(v), "{v}");
    }
}

#[test]
fn no_covariate_implicit_weights_are_plain_did() {
    let tmp = TempDir::new().unwrap();
    let panel = simulate(tmp.path(), "violate_A_timeinvariant", 300, 8);
    let out_dir = tmp.path().join("dec");
    let out = run(&[
        "decompose",
        "--input",
        path(&panel),
        "--out-dir",
        path(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut rdr = csv::Reader::from_path(out_dir.join("weights.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (variant, weight) = (col("variant"), col("weight"));
    let mut seen = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        if &rec[variant] == "two_period_implicit" {
            let w: f64 = rec[weight].parse().unwrap();
            assert!((w - 1.0).abs() <= 1e-10, "{w}");
            seen += 1;
        }
    }
    assert_eq!(seen, 300);
}

fn max_in_panel(balance: &Value, panel: &str, field: &str) -> f64 {
    balance["implicit_twfe"]["overall"]["panels"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["kind"] == panel)
        .flat_map(|p| {
            p["rows"]
                .as_array()
                .unwrap()
                .iter()
                .map(|r| r[field].as_f64().unwrap().abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn diagnose_balances_changes_and_flags_levels() {
    let tmp = TempDir::new().unwrap();
    let panel = simulate(tmp.path(), "violate_B_levels", 4000, 11);
    let out_dir = tmp.path().join("diag");
    let mut args = vec![
        "diagnose",
        "--input",
        path(&panel),
        "--out-dir",
        path(&out_dir),
        "--extended",
    ];
    args.extend(COVS);
    let out = run(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("exact by construction") && table.contains("std.diff"));
    let b = json(out_dir.join("balance.json"));
    assert!(max_in_panel(&b, "change", "difference") <= 1e-8);
    let level = max_in_panel(&b, "post_level", "std_difference").max(max_in_panel(
        &b,
        "pre_level",
        "std_difference",
    ));
    assert!(level > 0.1, "{level}");
    assert!(out_dir.join("balance.csv").exists());
}

#[test]
fn diagnose_rejects_unknown_functions() {
    let tmp = TempDir::new().unwrap();
    let panel = simulate(tmp.path(), "clean", 100, 1);
    let out = run(&[
        "diagnose",
        "--input",
        path(&panel),
        "--xvars",
        "x1",
        "--functions",
        "lag:x1",
        "--out-dir",
        path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "UnknownFunction");
}

#[test]
fn simulate_is_deterministic_and_echoes_config() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let pa = simulate(a.path(), "violate_B_levels", 500, 9);
    let pb = simulate(b.path(), "violate_B_levels", 500, 9);
    assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
    let cfg = json(a.path().join("dgp_config.json"));
    let beta = cfg["outcome"]["beta"].as_array().unwrap();
    assert_ne!(beta[0], beta[1]);
    assert_eq!(cfg["n_units"], 500);
    let oracle = json(a.path().join("oracle.json"));
    assert!(oracle["cells"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["att"]["value"].as_f64().unwrap() != 0.0));
}

#[test]
fn estimate_reads_config_file_and_column_sidecar() {
    let tmp = TempDir::new().unwrap();
    let panel = simulate(tmp.path(), "clean", 400, 4);
    let text =
        fs::read_to_string(&panel)
            .unwrap()
            .replacen("id,time,y,g", "unit,year,outcome,first", 1);
    fs::write(&panel, text).unwrap();
    let cols = tmp.path().join("columns.json");
    fs::write(
        &cols,
        r#"{"id":"unit","time":"year","y":"outcome","g":"first","x":["x1"],"z":["z1"]}"#,
    )
    .unwrap();
    let cfg = tmp.path().join("config.json");
    fs::write(
        &cfg,
        r#"{"method":"ra","bootstrap":{"draws":250,"seed":3}}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("est");
    let out = run(&[
        "estimate",
        "--input",
        path(&panel),
        "--columns",
        path(&cols),
        "--config",
        path(&cfg),
        "--out-dir",
        path(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let meta = json(out_dir.join("run_meta.json"));
    assert_eq!(meta["method"], "ra");
    assert_eq!(meta["bootstrap"]["draws"], 250);
    assert_eq!(meta["columns"]["x"][0], "x1");

    fs::write(&cfg, r#"{"methd":"ra"}"#).unwrap();
    let out = run(&[
        "estimate",
        "--input",
        path(&panel),
        "--columns",
        path(&cols),
        "--config",
        path(&cfg),
        "--out-dir",
        path(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_covariate_distributions_balance_within_noise() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "violate_B_levels", 10, 0);
    let mut cfg = json(tmp.path().join("dgp_config.json"));
    for g in cfg["groups"].as_array_mut().unwrap() {
        g["x_coef"] = serde_json::json!([0.0]);
        g["z_coef"] = serde_json::json!([0.0]);
        g["drift"] = serde_json::json!([0.0]);
    }
    cfg["n_units"] = 4000.into();
    let reps = 20;
    let mut diffs: Vec<Vec<f64>> = Vec::new();
    for seed in 0..reps {
        cfg["seed"] = seed.into();
        let dir = tmp.path().join(format!("rep{seed}"));
        let cfg_path = tmp.path().join("cfg.json");
        fs::write(&cfg_path, cfg.to_string()).unwrap();
        let out = run(&[
            "simulate",
            "--dgp-config",
            path(&cfg_path),
            "--out-dir",
            path(&dir),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let panel = dir.join("panel.csv");
        let mut args = vec!["diagnose", "--input", path(&panel), "--out-dir", path(&dir)];
        args.extend(COVS);
        let out = run(&args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let b = json(dir.join("balance.json"));
        let row: Vec<f64> = b["implicit_twfe"]["overall"]["panels"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|p| {
                p["rows"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|r| r["std_difference"].as_f64().unwrap())
            })
            .collect();
        diffs.push(row);
    }
    for j in 0..diffs[0].len() {
        let v: Vec<f64> = diffs.iter().map(|r| r[j]).collect();
        let mean = v.iter().sum::<f64>() / reps as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(
            mean.abs() <= 3.0 * sd / (reps as f64).sqrt() + 1e-12,
            "function {j}: {mean} sd {sd}"
        );
    }
}
