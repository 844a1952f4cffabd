//! Covariate balance under the implicit TWFE weights, and under the
//! propensity-score weights that balance by design.
//!
//! Two-period tables compare `Ê[w₁ f | D=1]` with `Ê[w₀ f | D=0]`.
//! Multi-period tables do the same per cell `(g, t)`, with the change panel
//! measured against period 1 so that the overall table, aggregated with the
//! `p̄_g / (T-g+1)` cell weights, balances `ΔX` exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtatt::GpsFit;
use crate::panel::PanelDataset;
use crate::twfe::{TwfeWeights, WeightRole, WeightVariant};

/// A scalar function of a unit's covariates in a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateFunction {
    /// `X_t - X_base` for covariate `j`.
    Change(usize),
    /// `X_t`.
    Post(usize),
    /// `X_base` (the period before treatment).
    Pre(usize),
    Z(usize),
    Square(Box<CovariateFunction>),
    Product(Box<CovariateFunction>, Box<CovariateFunction>),
}

impl CovariateFunction {
    /// Every change, post level, pre level and time-invariant column.
    pub fn defaults(data: &PanelDataset) -> Vec<Self> {
        let k = data.n_x();
        let mut v: Vec<Self> = (0..k).map(Self::Change).collect();
        v.extend((0..k).map(Self::Post));
        v.extend((0..k).map(Self::Pre));
        v.extend((0..data.n_z()).map(Self::Z));
        v
    }

    /// Squares of every default function and pairwise products of the
    /// post-level and time-invariant columns.
    pub fn extended(data: &PanelDataset) -> Vec<Self> {
        let base = Self::defaults(data);
        let mut v = base.clone();
        v.extend(base.iter().map(|f| Self::Square(Box::new(f.clone()))));
        let levels: Vec<Self> = (0..data.n_x())
            .map(Self::Post)
            .chain((0..data.n_z()).map(Self::Z))
            .collect();
        for a in 0..levels.len() {
            for b in a + 1..levels.len() {
                v.push(Self::Product(
                    Box::new(levels[a].clone()),
                    Box::new(levels[b].clone()),
                ));
            }
        }
        v
    }

    /// Parse `dx:NAME`, `post:NAME`, `pre:NAME`, `z:NAME`, optionally
    /// squared with `^2`, or a product `A*B` of two such terms.
    pub fn parse(spec: &str, data: &PanelDataset) -> Result<Self> {
        let unknown = || Error::UnknownFunction(spec.to_string());
        let factor = |s: &str| -> Result<Self> {
            let s = s.trim();
            let (s, squared) = match s.strip_suffix("^2") {
                Some(r) => (r, true),
                None => (s, false),
            };
            let (kind, name) = s.split_once(':').ok_or_else(unknown)?;
            let x_idx = || {
                data.meta()
                    .x_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(unknown)
            };
            let f = match kind {
                "dx" => Self::Change(x_idx()?),
                "post" => Self::Post(x_idx()?),
                "pre" => Self::Pre(x_idx()?),
                "z" => Self::Z(
                    data.meta()
                        .z_names
                        .iter()
                        .position(|n| n == name)
                        .ok_or_else(unknown)?,
                ),
                _ => return Err(unknown()),
            };
            Ok(if squared {
                Self::Square(Box::new(f))
            } else {
                f
            })
        };
        match spec.split_once('*') {
            Some((a, b)) => Ok(Self::Product(Box::new(factor(a)?), Box::new(factor(b)?))),
            None => factor(spec),
        }
    }

    pub fn label(&self, data: &PanelDataset) -> String {
        let m = data.meta();
        match self {
            Self::Change(j) => format!("dx:{}", m.x_names[*j]),
            Self::Post(j) => format!("post:{}", m.x_names[*j]),
            Self::Pre(j) => format!("pre:{}", m.x_names[*j]),
            Self::Z(j) => format!("z:{}", m.z_names[*j]),
            Self::Square(f) => format!("{}^2", f.label(data)),
            Self::Product(a, b) => format!("{}*{}", a.label(data), b.label(data)),
        }
    }

    fn check(&self, data: &PanelDataset) -> Result<()> {
        let bad = |j: usize, lim: usize| {
            if j >= lim {
                Err(Error::UnknownFunction(format!("{self:?}")))
            } else {
                Ok(())
            }
        };
        match self {
            Self::Change(j) | Self::Post(j) | Self::Pre(j) => bad(*j, data.n_x()),
            Self::Z(j) => bad(*j, data.n_z()),
            Self::Square(f) => f.check(data),
            Self::Product(a, b) => a.check(data).and(b.check(data)),
        }
    }

    pub fn eval(&self, data: &PanelDataset, i: usize, t: usize, base: usize) -> f64 {
        match self {
            Self::Change(j) => data.x_at(i, t, *j) - data.x_at(i, base, *j),
            Self::Post(j) => data.x_at(i, t, *j),
            Self::Pre(j) => data.x_at(i, base, *j),
            Self::Z(j) => data.z()[(i, *j)],
            Self::Square(f) => f.eval(data, i, t, base).powi(2),
            Self::Product(a, b) => a.eval(data, i, t, base) * b.eval(data, i, t, base),
        }
    }

    fn panel(&self) -> PanelKind {
        match self {
            Self::Change(_) => PanelKind::Change,
            Self::Post(_) => PanelKind::PostLevel,
            Self::Pre(_) => PanelKind::PreLevel,
            Self::Z(_) => PanelKind::TimeInvariant,
            _ => PanelKind::Custom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelKind {
    Change,
    PostLevel,
    PreLevel,
    TimeInvariant,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exactness {
    ExactByConstruction,
    Diagnostic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceSource {
    ImplicitTwfe,
    PropensityBenchmark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub label: String,
    pub treated_mean: f64,
    pub comparison_mean: f64,
    pub difference: f64,
    /// Difference over the pooled unweighted standard deviation.
    pub std_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePanel {
    pub kind: PanelKind,
    pub exactness: Exactness,
    pub rows: Vec<BalanceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    /// `None` for the overall table.
    pub cell: Option<(usize, usize)>,
    pub panels: Vec<BalancePanel>,
}

impl BalanceTable {
    pub fn panel(&self, kind: PanelKind) -> Option<&BalancePanel> {
        self.panels.iter().find(|p| p.kind == kind)
    }

    pub fn rows(&self) -> impl Iterator<Item = &BalanceRow> {
        self.panels.iter().flat_map(|p| p.rows.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub source: BalanceSource,
    pub cells: Vec<BalanceTable>,
    pub overall: BalanceTable,
}

/// Weighted sums for one function in one table.
#[derive(Default, Clone)]
struct Acc {
    treated: f64,
    comparison: f64,
    /// Unweighted values for the pooled standard deviation.
    values: Vec<f64>,
}

fn pooled_sd(v: &[f64]) -> f64 {
    let m = v.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / m;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m).sqrt()
}

fn build_table(
    cell: Option<(usize, usize)>,
    funcs: &[CovariateFunction],
    labels: &[String],
    acc: &[Acc],
    exact_change: bool,
) -> BalanceTable {
    let mut panels: BTreeMap<PanelKind, Vec<BalanceRow>> = BTreeMap::new();
    for (f, (label, a)) in funcs.iter().zip(labels.iter().zip(acc)) {
        let difference = a.treated - a.comparison;
        let sd = pooled_sd(&a.values);
        let std_difference = if sd > 0.0 { difference / sd } else { 0.0 };
        panels.entry(f.panel()).or_default().push(BalanceRow {
            label: label.clone(),
            treated_mean: a.treated,
            comparison_mean: a.comparison,
            difference,
            std_difference,
        });
    }
    BalanceTable {
        cell,
        panels: panels
            .into_iter()
            .map(|(kind, rows)| BalancePanel {
                kind,
                exactness: if exact_change && kind == PanelKind::Change {
                    Exactness::ExactByConstruction
                } else {
                    Exactness::Diagnostic
                },
                rows,
            })
            .collect(),
    }
}

fn check_functions(funcs: &[CovariateFunction], data: &PanelDataset) -> Result<Vec<String>> {
    funcs
        .iter()
        .map(|f| f.check(data).map(|_| f.label(data)))
        .collect()
}

fn untreated_counts(data: &PanelDataset) -> Vec<usize> {
    (1..=data.n_periods())
        .map(|t| (0..data.n_units()).filter(|&i| !data.treated(i, t)).count())
        .collect()
}

fn check_shape(weights: &TwfeWeights, data: &PanelDataset) -> Result<()> {
    if weights.n_units != data.n_units() || weights.n_periods != data.n_periods() {
        return Err(Error::ModeMismatch(
            "weights were computed on a different panel".into(),
        ));
    }
    Ok(())
}

/// Balance of covariate functions under implicit TWFE weights.
pub fn balance_audit(
    weights: &TwfeWeights,
    data: &PanelDataset,
    funcs: &[CovariateFunction],
) -> Result<BalanceReport> {
    check_shape(weights, data)?;
    let labels = check_functions(funcs, data)?;
    let nf = funcs.len();
    match weights.variant {
        WeightVariant::TwoPeriodImplicit => {
            let n1 = data.group_size(2) as f64;
            let n0 = (data.n_units() as f64) - n1;
            let mut acc = vec![Acc::default(); nf];
            for e in &weights.entries {
                for (a, f) in acc.iter_mut().zip(funcs) {
                    let v = f.eval(data, e.unit, 2, 1);
                    a.values.push(v);
                    match e.role {
                        WeightRole::Treated => a.treated += e.weight * v / n1,
                        _ => a.comparison += e.weight * v / n0,
                    }
                }
            }
            let table = build_table(Some((2, 2)), funcs, &labels, &acc, true);
            Ok(BalanceReport {
                source: BalanceSource::ImplicitTwfe,
                overall: BalanceTable {
                    cell: None,
                    ..table.clone()
                },
                cells: vec![table],
            })
        }
        WeightVariant::MultiPeriodImplicit => {
            let tt = data.n_periods();
            let n = data.n_units() as f64;
            let pbar = data.conditional_group_shares();
            let n0 = untreated_counts(data);
            let mut cells: BTreeMap<(usize, usize), Vec<Acc>> = BTreeMap::new();
            let mut overall = vec![Acc::default(); nf];
            for e in &weights.entries {
                match e.cell {
                    Some((g, t)) => {
                        let base = g - 1;
                        let c = pbar[&g] / (tt + 1 - g) as f64;
                        let acc = cells
                            .entry((g, t))
                            .or_insert_with(|| vec![Acc::default(); nf]);
                        for ((a, o), f) in acc.iter_mut().zip(overall.iter_mut()).zip(funcs) {
                            // change is measured from period 1 here, levels from g-1
                            let v = match f {
                                CovariateFunction::Change(_) => f.eval(data, e.unit, t, 1),
                                _ => f.eval(data, e.unit, t, base),
                            };
                            a.values.push(v);
                            o.values.push(v);
                            if e.role == WeightRole::Treated {
                                let m = data.group_size(g) as f64;
                                a.treated += e.weight * v / m;
                                o.treated += c * e.weight * v / m;
                            } else {
                                let m = n0[t - 1] as f64;
                                a.comparison += e.weight * v / m;
                                o.comparison += c * e.weight * v / m;
                            }
                        }
                    }
                    None => {
                        for (o, f) in overall.iter_mut().zip(funcs) {
                            let v = f.eval(data, e.unit, e.period, 1);
                            o.values.push(v);
                            o.comparison -= e.weight * v / n;
                        }
                    }
                }
            }
            Ok(BalanceReport {
                source: BalanceSource::ImplicitTwfe,
                cells: cells
                    .iter()
                    .map(|(&cell, acc)| build_table(Some(cell), funcs, &labels, acc, false))
                    .collect(),
                overall: build_table(None, funcs, &labels, &overall, true),
            })
        }
        v => Err(Error::WrongWeightVariant(format!(
            "balance needs implicit weights, got {v:?}"
        ))),
    }
}

/// The implicit-weight outcome contrast, which equals `α`.
pub fn reconstruct_alpha(weights: &TwfeWeights, data: &PanelDataset) -> Result<f64> {
    check_shape(weights, data)?;
    match weights.variant {
        WeightVariant::TwoPeriodImplicit => {
            let n1 = data.group_size(2) as f64;
            let n0 = data.n_units() as f64 - n1;
            Ok(weights
                .entries
                .iter()
                .map(|e| {
                    let dy = data.y(e.unit, 2) - data.y(e.unit, 1);
                    match e.role {
                        WeightRole::Treated => e.weight * dy / n1,
                        _ => -e.weight * dy / n0,
                    }
                })
                .sum())
        }
        WeightVariant::MultiPeriodImplicit => {
            let tt = data.n_periods();
            let n = data.n_units() as f64;
            let pbar = data.conditional_group_shares();
            let n0 = untreated_counts(data);
            let mut s = 0.0;
            for e in &weights.entries {
                let path = data.y(e.unit, e.period) - data.y(e.unit, 1);
                s += match (e.cell, e.role) {
                    (Some((g, _)), WeightRole::Treated) => {
                        pbar[&g] / (tt + 1 - g) as f64 * e.weight * path / data.group_size(g) as f64
                    }
                    (Some((g, t)), _) => {
                        -pbar[&g] / (tt + 1 - g) as f64 * e.weight * path / n0[t - 1] as f64
                    }
                    (None, _) => e.weight * path / n,
                };
            }
            Ok(s)
        }
        v => Err(Error::WrongWeightVariant(format!(
            "reconstruction needs implicit weights, got {v:?}"
        ))),
    }
}

/// Fitted scores above `1 - NEAR_ONE` on a comparison unit are rejected.
pub const NEAR_ONE: f64 = 1e-6;

/// Balance under the propensity-score weights: treated units weighted 1,
/// comparison units by fitted odds normalized to mean 1.
pub fn ipw_benchmark_balance(
    data: &PanelDataset,
    fits: &[GpsFit],
    funcs: &[CovariateFunction],
) -> Result<BalanceReport> {
    if fits.is_empty() {
        return Err(Error::NoResults);
    }
    let labels = check_functions(funcs, data)?;
    let nf = funcs.len();
    let tt = data.n_periods();
    let pbar = data.conditional_group_shares();
    let total: f64 = fits
        .iter()
        .map(|f| pbar.get(&f.g).copied().unwrap_or(0.0) / (tt + 1 - f.g) as f64)
        .sum();
    let mut tables = Vec::new();
    let mut overall = vec![Acc::default(); nf];
    for fit in fits {
        if fit.fitted.len() != data.n_units() {
            return Err(Error::ConfigMismatch(
                "score fitted on a different panel".into(),
            ));
        }
        let treated: Vec<usize> = (0..data.n_units())
            .filter(|&i| fit.in_sample[i] && data.group(i) == fit.g)
            .collect();
        let comparison: Vec<usize> = (0..data.n_units())
            .filter(|&i| fit.in_sample[i] && data.group(i) != fit.g)
            .collect();
        if let Some(&j) = comparison.iter().find(|&&j| fit.fitted[j] > 1.0 - NEAR_ONE) {
            return Err(Error::PropensityNearOne {
                max_score: fit.fitted[j],
            });
        }
        let odds: Vec<f64> = comparison
            .iter()
            .map(|&j| fit.fitted[j] / (1.0 - fit.fitted[j]))
            .collect();
        let mean_odds = odds.iter().sum::<f64>() / odds.len() as f64;
        let c = pbar.get(&fit.g).copied().unwrap_or(0.0) / (tt + 1 - fit.g) as f64 / total;
        let mut acc = vec![Acc::default(); nf];
        for ((a, o), f) in acc.iter_mut().zip(overall.iter_mut()).zip(funcs) {
            for &i in &treated {
                let v = f.eval(data, i, fit.t, fit.base);
                a.values.push(v);
                o.values.push(v);
                a.treated += v / treated.len() as f64;
            }
            for (&j, r) in comparison.iter().zip(&odds) {
                let v = f.eval(data, j, fit.t, fit.base);
                a.values.push(v);
                o.values.push(v);
                a.comparison += r / mean_odds * v / comparison.len() as f64;
            }
            o.treated += c * a.treated;
            o.comparison += c * a.comparison;
        }
        tables.push(build_table(
            Some((fit.g, fit.t)),
            funcs,
            &labels,
            &acc,
            false,
        ));
    }
    Ok(BalanceReport {
        source: BalanceSource::PropensityBenchmark,
        cells: tables,
        overall: build_table(None, funcs, &labels, &overall, false),
    })
}

/// Aligned plain-text rendering of one table.
pub fn render_table(table: &BalanceTable) -> String {
    let mut out = String::new();
    let head = match table.cell {
        Some((g, t)) => format!("cell g={g} t={t}"),
        None => "overall".into(),
    };
    let _ = writeln!(out, "{head}");
    let width = table
        .rows()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(8)
        .max(8);
    let _ = writeln!(
        out,
        "  {:<width$}  {:>12}  {:>12}  {:>12}  {:>10}",
        "function", "treated", "comparison", "difference", "std.diff"
    );
    for p in &table.panels {
        let tag = match p.exactness {
            Exactness::ExactByConstruction => "exact by construction",
            Exactness::Diagnostic => "diagnostic",
        };
        let _ = writeln!(out, "  [{:?}; {tag}]", p.kind);
        for r in &p.rows {
            let _ = writeln!(
                out,
                "  {:<width$}  {:>12.6}  {:>12.6}  {:>12.3e}  {:>10.4}",
                r.label, r.treated_mean, r.comparison_mean, r.difference, r.std_difference
            );
        }
    }
    out
}
