use std::fs;
use std::io::Write as _;
use std::path::Path;

use didforge::dgp::{self, DgpConfig};
use didforge::diagnostics::{self, BalanceReport, CovariateFunction};
use didforge::gtatt::{
    self, AggregateResult, BasePeriod, EstimatorConfig, GroupTimeResult, Link, Method,
};
use didforge::inference::{
    self, BootstrapConfig, BootstrapEstimate, CiKind, InfluenceMatrix, Multiplier, SeKind,
};
use didforge::panel::{self, ColumnMapping, ComparisonGroup, ValidationOptions, ValidationReport};
use didforge::twfe::{self, DecomposeOptions, ReferenceConstants, TwfeFit, TwfeMode, TwfeWeights};
use didforge::{Execution, PanelDataset};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::{
    BaseArg, ComparisonArg, DecomposeArgs, DiagnoseArgs, EstimateArgs, InputArgs, LinkArg,
    MethodArg, MultiplierArg, ReferenceArg, SimulateArgs,
};

/// Reconstruction must match alpha this closely before anything is written.
const RECONSTRUCTION_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] didforge::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{name} reconstruction {value} differs from alpha {alpha}")]
    Reconstruction {
        name: String,
        value: f64,
        alpha: f64,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(e) if !e.is_validation() => 3,
            CliError::Reconstruction { .. } => 3,
            _ => 2,
        }
    }

    pub fn report(&self, code: u8) -> String {
        let kind = match self {
            CliError::Lib(e) => e.kind(),
            CliError::Config(_) => "InvalidConfig",
            CliError::Reconstruction { .. } => "ReconstructionMismatch",
            CliError::Write { .. } => "Io",
        };
        json!({ "error": kind, "message": self.to_string(), "exit_code": code }).to_string()
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(didforge::Error::from)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    let wrap = |source| CliError::Write {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(wrap)?;
    fs::write(&path, bytes).map_err(wrap)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(didforge::Error::from)?;
    s.push('\n');
    write_file(dir, name, s.as_bytes())
}

fn write_rows<R: Serialize>(dir: &Path, name: &str, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(didforge::Error::from)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_file(dir, name, &bytes)
}

fn mapping(args: &InputArgs) -> Result<ColumnMapping> {
    let mut m = match &args.columns {
        Some(p) => read_json(p)?,
        None => ColumnMapping::default(),
    };
    if let Some(v) = &args.id_col {
        m.id = v.clone();
    }
    if let Some(v) = &args.time_col {
        m.time = v.clone();
    }
    if let Some(v) = &args.y_col {
        m.y = v.clone();
    }
    if let Some(v) = &args.g_col {
        m.g = v.clone();
    }
    if let Some(v) = &args.xvars {
        m.x = v.iter().filter(|s| !s.is_empty()).cloned().collect();
    }
    if let Some(v) = &args.zvars {
        m.z = v.iter().filter(|s| !s.is_empty()).cloned().collect();
    }
    Ok(m)
}

fn load(args: &InputArgs) -> Result<(PanelDataset, ColumnMapping, ValidationReport)> {
    let m = mapping(args)?;
    let data = panel::load_csv(&args.input, &m)?;
    let report = panel::validate(&data, &ValidationOptions::default());
    Ok((data, m, report))
}

fn label(data: &PanelDataset, period: usize) -> String {
    data.meta()
        .period_labels
        .get(period - 1)
        .cloned()
        .unwrap_or_else(|| "never".into())
}

/// Estimator and bootstrap settings read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EstimateFile {
    method: Option<Method>,
    estimator: Option<EstimatorConfig>,
    bootstrap: Option<BootstrapConfig>,
}

#[derive(Debug, Serialize)]
struct AttRow {
    g: String,
    t: String,
    base: String,
    event_time: i64,
    estimate: f64,
    se: f64,
    ci_lower: f64,
    ci_upper: f64,
    n_treated: usize,
    n_comparison: usize,
}

#[derive(Debug, Serialize)]
struct AggregateRow {
    estimand: String,
    event_time: Option<i64>,
    estimate: f64,
    se: f64,
    ci_lower: f64,
    ci_upper: f64,
    components: usize,
}

fn settings(args: &EstimateArgs) -> Result<(Method, EstimatorConfig, BootstrapConfig)> {
    let file: EstimateFile = match &args.config {
        Some(p) => read_json(p)?,
        None => EstimateFile::default(),
    };
    let mut method = file.method.unwrap_or(Method::Dr);
    let mut est = file.estimator.unwrap_or_default();
    let mut boot = file.bootstrap.unwrap_or_default();
    if let Some(m) = args.method {
        method = match m {
            MethodArg::Ra => Method::Ra,
            MethodArg::Ipw => Method::Ipw,
            MethodArg::Dr => Method::Dr,
        };
    }
    if let Some(b) = args.base_period {
        est.base_period = match b {
            BaseArg::Varying => BasePeriod::Varying,
            BaseArg::Universal => BasePeriod::Universal,
        };
    }
    if let Some(c) = args.comparison {
        est.comparison = match c {
            ComparisonArg::Notyet => ComparisonGroup::NotYetTreated,
            ComparisonArg::Never => ComparisonGroup::NeverTreated,
        };
    }
    if let Some(l) = args.link {
        est.link = match l {
            LinkArg::Logit => Link::Logit,
            LinkArg::Probit => Link::Probit,
        };
    }
    if let Some(b) = args.bootstrap_draws {
        boot.draws = b;
    }
    if let Some(m) = args.multiplier {
        boot.multiplier = match m {
            MultiplierArg::Rademacher => Multiplier::Rademacher,
            MultiplierArg::Mammen => Multiplier::Mammen,
        };
    }
    if let Some(s) = args.seed {
        boot.seed = s;
    }
    if let Some(c) = args.ci_level {
        boot.ci_level = c;
    }
    if args.iqr_se {
        boot.se_kind = SeKind::NormalizedIqr;
    }
    if args.quantile_ci {
        boot.ci_kind = CiKind::Quantile;
    }
    if !(boot.ci_level > 0.0 && boot.ci_level < 1.0) {
        return Err(CliError::Config(format!(
            "ci level {} outside (0, 1)",
            boot.ci_level
        )));
    }
    if boot.draws < inference::MIN_DRAWS {
        return Err(didforge::Error::TooFewDraws {
            got: boot.draws,
            min: inference::MIN_DRAWS,
        }
        .into());
    }
    if !(est.trim > 0.0 && est.trim < 0.5) {
        return Err(CliError::Config(format!(
            "trim {} outside (0, 0.5)",
            est.trim
        )));
    }
    Ok((method, est, boot))
}

pub fn estimate(args: &EstimateArgs) -> Result<()> {
    let (method, est, boot) = settings(args)?;
    let (data, columns, validation) = load(&args.input)?;
    let results = gtatt::estimate_all(&data, method, &est, Execution::Parallel)?;
    let mut aggregates = vec![gtatt::aggregate_overall(&results, &data)?];
    aggregates.extend(gtatt::aggregate_event_studies(&results, &data)?);
    let infl = InfluenceMatrix::from_results(&results, &aggregates)?;
    let b = inference::multiplier_bootstrap(&infl, &boot, Execution::Parallel)?;
    let (cells, aggs) = b.estimates.split_at(results.len());

    let rows = att_rows(&data, &results, cells);
    let agg_rows = aggregate_rows(&aggregates, aggs);
    let out = &args.input.out_dir;
    write_json(out, "att_gt.json", &rows)?;
    write_rows(out, "att_gt.csv", &rows)?;
    write_json(
        out,
        "aggregates.json",
        &json!({
            "overall": agg_rows.first(),
            "event_study": &agg_rows[1..],
        }),
    )?;
    write_json(
        out,
        "run_meta.json",
        &json!({
            "tool": "didforge",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": "estimate",
            "input": args.input.input.display().to_string(),
            "columns": columns,
            "method": method,
            "estimator": est,
            "bootstrap": boot,
            "n_units": data.n_units(),
            "n_periods": data.n_periods(),
            "validation": validation,
        }),
    )?;
    Ok(())
}

fn att_rows(
    data: &PanelDataset,
    results: &[GroupTimeResult],
    boot: &[BootstrapEstimate],
) -> Vec<AttRow> {
    results
        .iter()
        .zip(boot)
        .map(|(r, b)| AttRow {
            g: label(data, r.g),
            t: label(data, r.t),
            base: label(data, r.base),
            event_time: r.t as i64 - r.g as i64,
            estimate: r.estimate,
            se: b.se,
            ci_lower: b.ci_lower,
            ci_upper: b.ci_upper,
            n_treated: r.n_treated,
            n_comparison: r.n_comparison,
        })
        .collect()
}

fn aggregate_rows(aggregates: &[AggregateResult], boot: &[BootstrapEstimate]) -> Vec<AggregateRow> {
    aggregates
        .iter()
        .zip(boot)
        .map(|(a, b)| AggregateRow {
            estimand: a.kind.label(),
            event_time: match a.kind {
                gtatt::AggregateKind::EventStudy(e) => Some(e),
                gtatt::AggregateKind::Overall => None,
            },
            estimate: a.estimate,
            se: b.se,
            ci_lower: b.ci_lower,
            ci_upper: b.ci_upper,
            components: a.components.len(),
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct WeightRow {
    variant: String,
    unit: String,
    period: String,
    group: String,
    cell_g: String,
    cell_t: String,
    role: String,
    weight: f64,
    projection: f64,
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn weight_rows(data: &PanelDataset, w: &TwfeWeights, rows: &mut Vec<WeightRow>) {
    let variant = snake(&w.variant);
    for e in &w.entries {
        let (cg, ct) = e.cell.map_or((String::new(), String::new()), |(g, t)| {
            (label(data, g), label(data, t))
        });
        rows.push(WeightRow {
            variant: variant.clone(),
            unit: data.meta().unit_ids[e.unit].clone(),
            period: label(data, e.period),
            group: label(data, e.group),
            cell_g: cg,
            cell_t: ct,
            role: snake(&e.role),
            weight: e.weight,
            projection: e.projection,
        });
    }
}

fn check_reconstruction(name: &str, value: f64, fit: &TwfeFit) -> Result<()> {
    if (value - fit.alpha).abs() > RECONSTRUCTION_TOL * fit.alpha.abs().max(1.0) {
        return Err(CliError::Reconstruction {
            name: name.to_string(),
            value,
            alpha: fit.alpha,
        });
    }
    Ok(())
}

pub fn decompose(args: &DecomposeArgs) -> Result<()> {
    let (data, columns, validation) = load(&args.input)?;
    let reference = match args.reference {
        ReferenceArg::Zero => ReferenceConstants::Zero,
        ReferenceArg::Never => ReferenceConstants::NeverTreatedProjection,
    };
    let fit = twfe::fit_auto(&data)?;
    let opts = DecomposeOptions { reference };
    let report = twfe::decompose(&fit, &data, None, &opts)?;
    check_reconstruction("decomposition", report.reconstructed_alpha, &fit)?;

    let mut fits = vec![fit.clone()];
    if fit.mode == TwfeMode::TwoPeriod {
        fits.push(twfe::fit_multi_period(&data)?);
    }
    let mut rows = Vec::new();
    let mut implicit = Vec::new();
    for f in &fits {
        weight_rows(&data, &twfe::conditional_att_weights(f, &data)?, &mut rows);
        let iw = twfe::implicit_weights(f, &data)?;
        let r = diagnostics::reconstruct_alpha(&iw, &data)?;
        check_reconstruction("implicit weight", r, f)?;
        implicit.push(
            json!({ "variant": iw.variant, "reconstructed_alpha": r, "summary": iw.summary }),
        );
        weight_rows(&data, &iw, &mut rows);
    }

    let out = &args.input.out_dir;
    write_json(out, "twfe.json", &fit)?;
    write_rows(out, "weights.csv", &rows)?;
    write_json(
        out,
        "decomposition.json",
        &json!({
            "alpha": report.alpha,
            "reconstructed_alpha": report.reconstructed_alpha,
            "reconstruction_error": (report.reconstructed_alpha - report.alpha).abs(),
            "mode": report.mode,
            "cells": report.cells,
            "census": report.census,
            "reversal": report.reversal,
            "reference": report.reference,
            "implicit_weights": implicit,
        }),
    )?;
    write_json(
        out,
        "run_meta.json",
        &json!({
            "tool": "didforge",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": "decompose",
            "input": args.input.input.display().to_string(),
            "columns": columns,
            "n_units": data.n_units(),
            "n_periods": data.n_periods(),
            "validation": validation,
        }),
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BalanceCsvRow {
    source: String,
    cell_g: String,
    cell_t: String,
    panel: String,
    exactness: String,
    function: String,
    treated_mean: f64,
    comparison_mean: f64,
    difference: f64,
    std_difference: f64,
}

fn balance_rows(data: &PanelDataset, rep: &BalanceReport, rows: &mut Vec<BalanceCsvRow>) {
    for table in rep.cells.iter().chain(std::iter::once(&rep.overall)) {
        let (cg, ct) = table
            .cell
            .map_or(("overall".to_string(), "overall".to_string()), |(g, t)| {
                (label(data, g), label(data, t))
            });
        for p in &table.panels {
            for r in &p.rows {
                rows.push(BalanceCsvRow {
                    source: snake(&rep.source),
                    cell_g: cg.clone(),
                    cell_t: ct.clone(),
                    panel: snake(&p.kind),
                    exactness: snake(&p.exactness),
                    function: r.label.clone(),
                    treated_mean: r.treated_mean,
                    comparison_mean: r.comparison_mean,
                    difference: r.difference,
                    std_difference: r.std_difference,
                });
            }
        }
    }
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    let (data, columns, validation) = load(&args.input)?;
    let funcs = match &args.functions {
        Some(list) => list
            .iter()
            .map(|s| CovariateFunction::parse(s, &data))
            .collect::<didforge::Result<Vec<_>>>()?,
        None if args.extended => CovariateFunction::extended(&data),
        None => CovariateFunction::defaults(&data),
    };
    let fit = twfe::fit_auto(&data)?;
    let w = twfe::implicit_weights(&fit, &data)?;
    let rep = diagnostics::balance_audit(&w, &data, &funcs)?;
    let mut rows = Vec::new();
    balance_rows(&data, &rep, &mut rows);
    let bench = if args.benchmark {
        let cfg = EstimatorConfig::default();
        let fits = gtatt::post_cells(&data)
            .into_iter()
            .map(|(g, t)| gtatt::fit_gps(&data, g, t, &cfg))
            .collect::<didforge::Result<Vec<_>>>()?;
        let b = diagnostics::ipw_benchmark_balance(&data, &fits, &funcs)?;
        balance_rows(&data, &b, &mut rows);
        Some(b)
    } else {
        None
    };

    let out = &args.input.out_dir;
    write_json(
        out,
        "balance.json",
        &json!({ "implicit_twfe": rep, "propensity_benchmark": bench }),
    )?;
    write_rows(out, "balance.csv", &rows)?;
    write_json(
        out,
        "run_meta.json",
        &json!({
            "tool": "didforge",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": "diagnose",
            "input": args.input.input.display().to_string(),
            "columns": columns,
            "functions": funcs.iter().map(|f| f.label(&data)).collect::<Vec<_>>(),
            "n_units": data.n_units(),
            "n_periods": data.n_periods(),
            "validation": validation,
        }),
    )?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "implicit TWFE weights");
    let _ = write!(stdout, "{}", diagnostics::render_table(&rep.overall));
    if let Some(b) = &bench {
        let _ = writeln!(stdout, "\npropensity score benchmark");
        let _ = write!(stdout, "{}", diagnostics::render_table(&b.overall));
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg: DgpConfig = match (&args.preset, &args.dgp_config) {
        (Some(name), _) => dgp::violation_preset(name)?,
        (None, Some(path)) => read_json(path)?,
        (None, None) => {
            return Err(CliError::Config(
                "simulate needs --preset or --dgp-config".into(),
            ))
        }
    };
    if let Some(n) = args.n {
        cfg.n_units = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let (data, oracle) = dgp::generate(&cfg)?;
    let mut buf = Vec::new();
    panel::write_csv(&data, &mut buf)?;
    write_file(&args.out_dir, "panel.csv", &buf)?;
    write_json(&args.out_dir, "oracle.json", &oracle)?;
    write_json(&args.out_dir, "dgp_config.json", &cfg)?;
    Ok(())
}
