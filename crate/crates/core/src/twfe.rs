//! Two-way fixed effects: fits, weights and decompositions of `α`.
//!
//! Two-period mode works on first differences (`ΔY` on `D` and `ΔX` with an
//! intercept). Multi-period mode runs the within regression on
//! double-demeaned data pooled over all unit-periods.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linproj::project;
use crate::panel::{
    double_demean_matrix, stack, two_period_view, DemeanedPanel, PanelDataset, TwoPeriodView,
};

/// Weights within this distance of zero count as near zero in summaries.
pub const NEAR_ZERO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwfeMode {
    TwoPeriod,
    MultiPeriod,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwfeFit {
    pub mode: TwfeMode,
    pub alpha: f64,
    /// Coefficients on `ΔX` (two-period) or `Ẍ` (multi-period).
    pub beta: Vec<f64>,
    /// Two-period only: intercept of the first-difference regression.
    pub intercept: Option<f64>,
    /// Projection of the treatment on the covariates. Two-period: intercept
    /// first, then `ΔX`. Multi-period: `Γ` on `Ẍ`, no intercept.
    pub gamma: Vec<f64>,
    /// `Ê[(D - L(D|ΔX))²]` or `Ê[(D̈ - Ẍ'Γ)²]`.
    pub alpha_den: f64,
    /// `Ê[(D - L)ΔY]` or `Ê[(D̈ - Ẍ'Γ)Ÿ]`.
    pub alpha_num: f64,
    pub n_units: usize,
    pub n_periods: usize,
    /// `L(D|ΔX)` as `n × 1`, or `Ẍ'Γ` as `n × T`.
    #[serde(skip)]
    pub treatment_projection: DMatrix<f64>,
    /// `D - L(D|ΔX)` as `n × 1`, or `D̈ - Ẍ'Γ` as `n × T`.
    #[serde(skip)]
    pub treatment_residual: DMatrix<f64>,
}

fn no_variation(den: f64, scale: f64) -> bool {
    !(den > 1e-12 * scale) || den == 0.0
}

pub fn fit_two_period(view: &TwoPeriodView) -> Result<TwfeFit> {
    let n = view.n();
    let n1 = view.n_treated();
    if n1 == 0 || n1 == n {
        return Err(Error::NoVariationInD);
    }
    let d = view.d_vector();
    let lp = project(&d, &view.dx, None)?;
    let resid = &lp.residuals;
    let den = resid.norm_squared() / n as f64;
    if no_variation(den, d.norm_squared() / n as f64) {
        return Err(Error::NoResidualTreatmentVariation);
    }
    let num = resid.dot(&view.dy) / n as f64;
    let alpha = num / den;
    let rest = project(&(&view.dy - &d * alpha), &view.dx, None)?;
    Ok(TwfeFit {
        mode: TwfeMode::TwoPeriod,
        alpha,
        beta: rest.coefficients.iter().skip(1).copied().collect(),
        intercept: Some(rest.coefficients[0]),
        gamma: lp.coefficients.iter().copied().collect(),
        alpha_den: den,
        alpha_num: num,
        n_units: n,
        n_periods: 2,
        treatment_projection: DMatrix::from_column_slice(n, 1, lp.fitted.as_slice()),
        treatment_residual: DMatrix::from_column_slice(n, 1, resid.as_slice()),
    })
}

pub fn fit_multi_period(data: &PanelDataset) -> Result<TwfeFit> {
    let (n, t) = (data.n_units(), data.n_periods());
    let dm = DemeanedPanel::new(data);
    let d = stack(&dm.d.values);
    let y = stack(&dm.y.values);
    let k = data.n_x();
    let xs = dm.stacked_x();
    let (gamma, proj) = if k > 0 {
        let f = project(&d, &xs, None)?;
        (f.coefficients, f.fitted)
    } else {
        (DVector::zeros(0), DVector::zeros(n * t))
    };
    let resid = &d - &proj;
    let m = (n * t) as f64;
    let total = d.norm_squared() / m;
    if no_variation(total, 1.0) {
        return Err(Error::NoVariationInD);
    }
    let den = resid.norm_squared() / m;
    if no_variation(den, total) {
        return Err(Error::NoResidualTreatmentVariation);
    }
    let num = resid.dot(&y) / m;
    let alpha = num / den;
    let beta = if k > 0 {
        project(&(&y - &d * alpha), &xs, None)?
            .coefficients
            .iter()
            .copied()
            .collect()
    } else {
        Vec::new()
    };
    let unstack = |v: &DVector<f64>| DMatrix::from_fn(n, t, |i, c| v[i * t + c]);
    Ok(TwfeFit {
        mode: TwfeMode::MultiPeriod,
        alpha,
        beta,
        intercept: None,
        gamma: gamma.iter().copied().collect(),
        alpha_den: den,
        alpha_num: num,
        n_units: n,
        n_periods: t,
        treatment_projection: unstack(&proj),
        treatment_residual: unstack(&resid),
    })
}

/// Two-period fit when `T = 2`, multi-period otherwise.
pub fn fit_auto(data: &PanelDataset) -> Result<TwfeFit> {
    if data.n_periods() == 2 {
        fit_two_period(&two_period_view(data)?)
    } else {
        fit_multi_period(data)
    }
}

fn check_mode(fit: &TwfeFit, data: &PanelDataset) -> Result<()> {
    if fit.n_units != data.n_units() || fit.n_periods != data.n_periods() {
        return Err(Error::ModeMismatch(format!(
            "fit is {} x {}, data is {} x {}",
            fit.n_units,
            fit.n_periods,
            data.n_units(),
            data.n_periods()
        )));
    }
    if fit.mode == TwfeMode::TwoPeriod && data.n_periods() != 2 {
        return Err(Error::ModeMismatch(
            "two-period fit on a longer panel".into(),
        ));
    }
    Ok(())
}

/// `Ê[D_s]` for `s = 1..T`, index `s - 1`.
fn treated_shares(data: &PanelDataset) -> Vec<f64> {
    let n = data.n_units() as f64;
    (1..=data.n_periods())
        .map(|s| (0..data.n_units()).filter(|&i| data.treated(i, s)).count() as f64 / n)
        .collect()
}

/// `h(g,t) = 1{t >= g} - (T-g+1)/T - Ê[D_t] + (1/T) Σ_s Ê[D_s]`.
///
/// Equals `D̈_it` for any unit with `G_i = g`.
pub fn h_value(data: &PanelDataset, g: usize, t: usize) -> f64 {
    h_with_shares(&treated_shares(data), data.n_periods(), g, t)
}

fn h_with_shares(shares: &[f64], periods: usize, g: usize, t: usize) -> f64 {
    let tt = periods as f64;
    let post = if t >= g { 1.0 } else { 0.0 };
    let exposure = (periods + 1 - g.min(periods + 1)) as f64 / tt;
    post - exposure - shares[t - 1] + shares.iter().sum::<f64>() / tt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightVariant {
    TwoPeriodConditionalAtt,
    TwoPeriodImplicit,
    MultiPeriodConditionalAtt,
    MultiPeriodImplicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRole {
    /// Unit-period in a post-treatment cell of its own group.
    Treated,
    /// Untreated unit-period serving as a comparison for a cell.
    Comparison,
    /// Pre-treatment unit-period (including never-treated units).
    PreTreatment,
    /// Untreated unit-period in a period before any group is treated.
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub unit: usize,
    pub period: usize,
    pub group: usize,
    /// Cell the weight belongs to; `None` for unassigned entries.
    pub cell: Option<(usize, usize)>,
    pub role: WeightRole,
    pub weight: f64,
    /// `L(D|ΔX)` or `Ẍ'Γ` for this unit-period.
    pub projection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellWeightSummary {
    pub cell: Option<(usize, usize)>,
    pub role: WeightRole,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub cells: Vec<CellWeightSummary>,
    /// Counts below refer to entries with role `Treated`.
    pub n_treated_entries: usize,
    pub n_negative: usize,
    pub share_negative: f64,
    pub share_near_zero: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwfeWeights {
    pub variant: WeightVariant,
    pub n_units: usize,
    pub n_periods: usize,
    pub alpha: f64,
    pub entries: Vec<WeightEntry>,
    pub summary: WeightSummary,
}

type CellKey = (Option<(usize, usize)>, WeightRole);

fn summarize(entries: &[WeightEntry]) -> WeightSummary {
    let mut cells: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for e in entries {
        cells.entry((e.cell, e.role)).or_default().push(e.weight);
    }
    let cells = cells
        .into_iter()
        .map(|((cell, role), w)| CellWeightSummary {
            cell,
            role,
            n: w.len(),
            mean: w.iter().sum::<f64>() / w.len() as f64,
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    let treated: Vec<f64> = entries
        .iter()
        .filter(|e| e.role == WeightRole::Treated)
        .map(|e| e.weight)
        .collect();
    let m = treated.len();
    let n_negative = treated.iter().filter(|&&w| w < 0.0).count();
    let near = treated.iter().filter(|&&w| w.abs() <= NEAR_ZERO).count();
    WeightSummary {
        cells,
        n_treated_entries: m,
        n_negative,
        share_negative: if m > 0 {
            n_negative as f64 / m as f64
        } else {
            0.0
        },
        share_near_zero: if m > 0 { near as f64 / m as f64 } else { 0.0 },
        min: treated.iter().copied().fold(f64::INFINITY, f64::min),
        max: treated.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn weights(fit: &TwfeFit, variant: WeightVariant, entries: Vec<WeightEntry>) -> TwfeWeights {
    TwfeWeights {
        variant,
        n_units: fit.n_units,
        n_periods: fit.n_periods,
        alpha: fit.alpha,
        summary: summarize(&entries),
        entries,
    }
}

impl TwfeWeights {
    pub fn treated(&self) -> impl Iterator<Item = &WeightEntry> {
        self.entries
            .iter()
            .filter(|e| e.role == WeightRole::Treated)
    }
}

/// `Σ_{g treated} Σ_{t>=g} Ê[(h(g,t) - Ẍ'Γ)|G=g] p_g`, equal to `T·α_den`.
fn multi_period_weight_denominator(fit: &TwfeFit, data: &PanelDataset) -> f64 {
    let n = data.n_units() as f64;
    let mut s = 0.0;
    for i in (0..data.n_units()).filter(|&i| !data.is_never(i)) {
        let g = data.group(i);
        for t in g..=data.n_periods() {
            s += fit.treatment_residual[(i, t - 1)];
        }
    }
    // mean over G=g times p_g is a sum over the group divided by n
    s / n
}

/// Per-unit weights on conditional ATTs.
pub fn conditional_att_weights(fit: &TwfeFit, data: &PanelDataset) -> Result<TwfeWeights> {
    check_mode(fit, data)?;
    match fit.mode {
        TwfeMode::TwoPeriod => {
            let l = fit.treatment_projection.column(0);
            let treated: Vec<usize> = (0..data.n_units())
                .filter(|&i| data.group(i) == 2)
                .collect();
            let c = treated.iter().map(|&i| 1.0 - l[i]).sum::<f64>() / treated.len() as f64;
            if !(c.abs() > 0.0) {
                return Err(Error::DegenerateDenominator);
            }
            let entries = treated
                .iter()
                .map(|&i| WeightEntry {
                    unit: i,
                    period: 2,
                    group: 2,
                    cell: Some((2, 2)),
                    role: WeightRole::Treated,
                    weight: (1.0 - l[i]) / c,
                    projection: l[i],
                })
                .collect();
            Ok(weights(
                fit,
                WeightVariant::TwoPeriodConditionalAtt,
                entries,
            ))
        }
        TwfeMode::MultiPeriod => {
            let shares = treated_shares(data);
            let p = data.group_shares();
            let den = multi_period_weight_denominator(fit, data);
            if !(den.abs() > 0.0) {
                return Err(Error::DegenerateDenominator);
            }
            let tt = data.n_periods();
            let mut entries = Vec::with_capacity(data.n_units() * tt);
            for i in 0..data.n_units() {
                let g = data.group(i);
                for t in 1..=tt {
                    let proj = fit.treatment_projection[(i, t - 1)];
                    let h = h_with_shares(&shares, tt, g, t);
                    entries.push(WeightEntry {
                        unit: i,
                        period: t,
                        group: g,
                        cell: Some((g, t)),
                        role: if data.treated(i, t) {
                            WeightRole::Treated
                        } else {
                            WeightRole::PreTreatment
                        },
                        weight: (h - proj) * p[&g] / den,
                        projection: proj,
                    });
                }
            }
            Ok(weights(
                fit,
                WeightVariant::MultiPeriodConditionalAtt,
                entries,
            ))
        }
    }
}

/// Implicit regression weights on treated and comparison outcomes.
pub fn implicit_weights(fit: &TwfeFit, data: &PanelDataset) -> Result<TwfeWeights> {
    check_mode(fit, data)?;
    match fit.mode {
        TwfeMode::TwoPeriod => {
            let l = fit.treatment_projection.column(0);
            let n = data.n_units();
            let p = data.group_size(2) as f64 / n as f64;
            let den = fit.alpha_den;
            let entries = (0..n)
                .map(|i| {
                    let treated = data.group(i) == 2;
                    WeightEntry {
                        unit: i,
                        period: 2,
                        group: data.group(i),
                        cell: Some((2, 2)),
                        role: if treated {
                            WeightRole::Treated
                        } else {
                            WeightRole::Comparison
                        },
                        weight: if treated {
                            p * (1.0 - l[i]) / den
                        } else {
                            (1.0 - p) * l[i] / den
                        },
                        projection: l[i],
                    }
                })
                .collect();
            Ok(weights(fit, WeightVariant::TwoPeriodImplicit, entries))
        }
        TwfeMode::MultiPeriod => {
            let tt = data.n_periods();
            let n = data.n_units();
            let t_f = tt as f64;
            let p = data.group_shares();
            let pbar = data.conditional_group_shares();
            let groups = data.treated_groups();
            let den = fit.alpha_den;
            let shares = treated_shares(data);
            let mut entries = Vec::new();
            for &g in &groups {
                let scale = (tt + 1 - g) as f64 / t_f * p[&g] / pbar[&g] / den;
                for t in g..=tt {
                    for i in (0..n).filter(|&i| data.group(i) == g) {
                        let proj = fit.treatment_projection[(i, t - 1)];
                        entries.push(WeightEntry {
                            unit: i,
                            period: t,
                            group: g,
                            cell: Some((g, t)),
                            role: WeightRole::Treated,
                            weight: (h_with_shares(&shares, tt, g, t) - proj) * scale,
                            projection: proj,
                        });
                    }
                    let untreated = 1.0 - shares[t - 1];
                    if untreated <= 0.0 {
                        continue;
                    }
                    let odds = untreated / (1.0 - untreated);
                    for j in (0..n).filter(|&j| !data.treated(j, t)) {
                        entries.push(WeightEntry {
                            unit: j,
                            period: t,
                            group: data.group(j),
                            cell: Some((g, t)),
                            role: WeightRole::Comparison,
                            weight: -fit.treatment_residual[(j, t - 1)] * scale * odds,
                            projection: fit.treatment_projection[(j, t - 1)],
                        });
                    }
                }
            }
            // Periods after the first in which no group has started yet.
            let first = groups.first().copied().unwrap_or(tt + 1);
            for t in 2..first.min(tt + 1) {
                for j in 0..n {
                    entries.push(WeightEntry {
                        unit: j,
                        period: t,
                        group: data.group(j),
                        cell: None,
                        role: WeightRole::Unassigned,
                        weight: fit.treatment_residual[(j, t - 1)] / (t_f * den),
                        projection: fit.treatment_projection[(j, t - 1)],
                    });
                }
            }
            Ok(weights(fit, WeightVariant::MultiPeriodImplicit, entries))
        }
    }
}

/// Period effects and covariate coefficients subtracted from outcome paths
/// in the multi-period decomposition. The total does not depend on them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceConstants {
    #[default]
    Zero,
    /// Within regression on never-treated units only.
    NeverTreatedProjection,
    Custom {
        theta: Vec<f64>,
        lambda0: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedReference {
    pub theta: Vec<f64>,
    pub lambda0: Vec<f64>,
}

fn resolve_reference(
    reference: &ReferenceConstants,
    data: &PanelDataset,
) -> Result<ResolvedReference> {
    let (tt, k) = (data.n_periods(), data.n_x());
    match reference {
        ReferenceConstants::Zero => Ok(ResolvedReference {
            theta: vec![0.0; tt],
            lambda0: vec![0.0; k],
        }),
        ReferenceConstants::Custom { theta, lambda0 } => {
            if theta.len() != tt || lambda0.len() != k {
                return Err(Error::InvalidConfig(format!(
                    "reference constants need {tt} period effects and {k} coefficients"
                )));
            }
            Ok(ResolvedReference {
                theta: theta.clone(),
                lambda0: lambda0.clone(),
            })
        }
        ReferenceConstants::NeverTreatedProjection => {
            let units: Vec<usize> = (0..data.n_units()).filter(|&i| data.is_never(i)).collect();
            if units.is_empty() {
                return Err(Error::InvalidConfig(
                    "no never-treated units for the reference projection".into(),
                ));
            }
            let m = units.len();
            let sub = |a: &DMatrix<f64>| DMatrix::from_fn(m, tt, |r, c| a[(units[r], c)]);
            let lambda0: Vec<f64> = if k > 0 {
                let y = stack(&double_demean_matrix(&sub(data.outcome())).values);
                let xd: Vec<DMatrix<f64>> = data
                    .xs()
                    .iter()
                    .map(|x| double_demean_matrix(&sub(x)).values)
                    .collect();
                let xs = DMatrix::from_fn(m * tt, k, |r, j| xd[j][(r / tt, r % tt)]);
                project(&y, &xs, None)?
                    .coefficients
                    .iter()
                    .copied()
                    .collect()
            } else {
                Vec::new()
            };
            let theta = (1..=tt)
                .map(|t| {
                    units
                        .iter()
                        .map(|&i| {
                            data.y(i, t)
                                - (0..k).map(|j| data.x_at(i, t, j) * lambda0[j]).sum::<f64>()
                        })
                        .sum::<f64>()
                        / m as f64
                })
                .collect();
            Ok(ResolvedReference { theta, lambda0 })
        }
    }
}

/// Conditional treatment effects for every unit-period, `n × T`; only
/// post-treatment entries are read.
pub type ConditionalAtts = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTerm {
    pub unit: usize,
    pub period: usize,
    pub group: usize,
    pub weight: f64,
    /// Two-period: `L₁(ΔY|ΔX) - L₀(ΔY|ΔX)`. Multi-period: the adjusted
    /// outcome path relative to period `G-1`.
    pub path: f64,
    /// Share of `α` attributed to this term; the terms sum to `α`.
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellContribution {
    pub g: usize,
    pub t: usize,
    pub post: bool,
    /// `Ê[w | G=g]` for this cell.
    pub mean_weight: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub variable: String,
    pub mean_negative: Option<f64>,
    pub mean_nonnegative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeWeightCensus {
    /// Post-treatment entries considered.
    pub n_entries: usize,
    pub n_negative: usize,
    pub share_negative: f64,
    pub share_near_zero: f64,
    pub negative_mass: f64,
    pub profile: Vec<ProfileRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedWeight {
    pub unit: usize,
    pub projection: f64,
    pub weight: f64,
}

/// Two-period weights are `a + b·L(D|ΔX)` with `b < 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReversal {
    pub intercept: f64,
    pub slope: f64,
    pub max_affine_residual: f64,
    /// Treated units ordered by increasing projection.
    pub ranking: Vec<RankedWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAttribution {
    /// Weighted average of the true conditional effects.
    pub weighted_att: f64,
    /// `α` minus `weighted_att`.
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub mode: TwfeMode,
    pub alpha: f64,
    pub reconstructed_alpha: f64,
    pub terms: Vec<DecompositionTerm>,
    pub cells: Vec<CellContribution>,
    pub census: NegativeWeightCensus,
    pub reversal: Option<WeightReversal>,
    pub reference: Option<ResolvedReference>,
    pub oracle: Option<OracleAttribution>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecomposeOptions {
    pub reference: ReferenceConstants,
}

fn mean_of(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn census(weights: &[f64], columns: &[(String, Vec<f64>)]) -> NegativeWeightCensus {
    let m = weights.len();
    let neg: Vec<bool> = weights.iter().map(|&w| w < 0.0).collect();
    let n_negative = neg.iter().filter(|&&b| b).count();
    let profile = columns
        .iter()
        .map(|(name, vals)| {
            let (a, b): (Vec<_>, Vec<_>) = vals
                .iter()
                .copied()
                .zip(neg.iter().copied())
                .partition(|&(_, n)| n);
            ProfileRow {
                variable: name.clone(),
                mean_negative: mean_of(&a.iter().map(|x| x.0).collect::<Vec<_>>()),
                mean_nonnegative: mean_of(&b.iter().map(|x| x.0).collect::<Vec<_>>()),
            }
        })
        .collect();
    NegativeWeightCensus {
        n_entries: m,
        n_negative,
        share_negative: if m > 0 {
            n_negative as f64 / m as f64
        } else {
            0.0
        },
        share_near_zero: if m > 0 {
            weights.iter().filter(|w| w.abs() <= NEAR_ZERO).count() as f64 / m as f64
        } else {
            0.0
        },
        negative_mass: weights.iter().filter(|&&w| w < 0.0).sum(),
        profile,
    }
}

/// Decompose `α` into weighted conditional terms.
pub fn decompose(
    fit: &TwfeFit,
    data: &PanelDataset,
    oracle: Option<&ConditionalAtts>,
    opts: &DecomposeOptions,
) -> Result<DecompositionReport> {
    check_mode(fit, data)?;
    if let Some(o) = oracle {
        if o.shape() != (data.n_units(), data.n_periods()) {
            return Err(Error::ConfigMismatch(
                "oracle effects do not match the panel shape".into(),
            ));
        }
    }
    match fit.mode {
        TwfeMode::TwoPeriod => decompose_two_period(fit, data, oracle),
        TwfeMode::MultiPeriod => decompose_multi_period(fit, data, oracle, opts),
    }
}

fn decompose_two_period(
    fit: &TwfeFit,
    data: &PanelDataset,
    oracle: Option<&ConditionalAtts>,
) -> Result<DecompositionReport> {
    let view = two_period_view(data)?;
    let w = conditional_att_weights(fit, data)?;
    let treated_mask = view.d.clone();
    let untreated_mask: Vec<bool> = view.d.iter().map(|d| !d).collect();
    let l1 = project(&view.dy, &view.dx, Some(&treated_mask))?;
    let l0 = project(&view.dy, &view.dx, Some(&untreated_mask))?;
    let n1 = view.n_treated() as f64;
    let terms: Vec<DecompositionTerm> = w
        .entries
        .iter()
        .map(|e| {
            let path = l1.fitted[e.unit] - l0.fitted[e.unit];
            DecompositionTerm {
                unit: e.unit,
                period: 2,
                group: 2,
                weight: e.weight,
                path,
                contribution: e.weight * path / n1,
            }
        })
        .collect();
    let reconstructed = terms.iter().map(|t| t.contribution).sum::<f64>();

    let ws: Vec<f64> = w.entries.iter().map(|e| e.weight).collect();
    let units: Vec<usize> = w.entries.iter().map(|e| e.unit).collect();
    let mut cols = vec![(
        "projection".to_string(),
        w.entries.iter().map(|e| e.projection).collect::<Vec<_>>(),
    )];
    for j in 0..data.n_x() {
        let name = &data.meta().x_names[j];
        cols.push((
            format!("dx:{name}"),
            units.iter().map(|&i| view.dx[(i, j + 1)]).collect(),
        ));
        cols.push((
            format!("post:{name}"),
            units.iter().map(|&i| view.x_post[(i, j)]).collect(),
        ));
        cols.push((
            format!("pre:{name}"),
            units.iter().map(|&i| view.x_pre[(i, j)]).collect(),
        ));
    }
    for j in 0..data.n_z() {
        cols.push((
            format!("z:{}", data.meta().z_names[j]),
            units.iter().map(|&i| view.z[(i, j)]).collect(),
        ));
    }

    let c = units
        .iter()
        .map(|&i| 1.0 - fit.treatment_projection[(i, 0)])
        .sum::<f64>()
        / n1;
    let (intercept, slope) = (1.0 / c, -1.0 / c);
    let max_affine_residual = w
        .entries
        .iter()
        .map(|e| (e.weight - (intercept + slope * e.projection)).abs())
        .fold(0.0, f64::max);
    let mut ranking: Vec<RankedWeight> = w
        .entries
        .iter()
        .map(|e| RankedWeight {
            unit: e.unit,
            projection: e.projection,
            weight: e.weight,
        })
        .collect();
    ranking.sort_by(|a, b| {
        a.projection
            .total_cmp(&b.projection)
            .then(a.unit.cmp(&b.unit))
    });

    let oracle = oracle.map(|o| {
        let weighted_att = w
            .entries
            .iter()
            .map(|e| e.weight * o[(e.unit, 1)])
            .sum::<f64>()
            / n1;
        OracleAttribution {
            weighted_att,
            bias: fit.alpha - weighted_att,
        }
    });
    Ok(DecompositionReport {
        mode: TwfeMode::TwoPeriod,
        alpha: fit.alpha,
        reconstructed_alpha: reconstructed,
        cells: vec![CellContribution {
            g: 2,
            t: 2,
            post: true,
            mean_weight: ws.iter().sum::<f64>() / n1,
            contribution: reconstructed,
        }],
        terms,
        census: census(&ws, &cols),
        reversal: Some(WeightReversal {
            intercept,
            slope,
            max_affine_residual,
            ranking,
        }),
        reference: None,
        oracle,
    })
}

fn decompose_multi_period(
    fit: &TwfeFit,
    data: &PanelDataset,
    oracle: Option<&ConditionalAtts>,
    opts: &DecomposeOptions,
) -> Result<DecompositionReport> {
    let w = conditional_att_weights(fit, data)?;
    let reference = resolve_reference(&opts.reference, data)?;
    let k = data.n_x();
    let sizes: BTreeMap<usize, usize> = data
        .group_support()
        .into_iter()
        .map(|g| (g, data.group_size(g)))
        .collect();
    let mut terms = Vec::with_capacity(w.entries.len());
    let mut cells: BTreeMap<(usize, usize), (f64, f64, bool)> = BTreeMap::new();
    for e in &w.entries {
        let i = e.unit;
        let base = e.group - 1;
        let t = e.period;
        let adj = reference.theta[t - 1] - reference.theta[base - 1]
            + (0..k)
                .map(|j| (data.x_at(i, t, j) - data.x_at(i, base, j)) * reference.lambda0[j])
                .sum::<f64>();
        let path = data.y(i, t) - data.y(i, base) - adj;
        let ng = sizes[&e.group] as f64;
        let contribution = e.weight * path / ng;
        let cell = cells
            .entry((e.group, t))
            .or_insert((0.0, 0.0, e.role == WeightRole::Treated));
        cell.0 += e.weight / ng;
        cell.1 += contribution;
        terms.push(DecompositionTerm {
            unit: i,
            period: t,
            group: e.group,
            weight: e.weight,
            path,
            contribution,
        });
    }
    let reconstructed = terms.iter().map(|t| t.contribution).sum::<f64>();

    let post: Vec<&WeightEntry> = w.treated().collect();
    let ws: Vec<f64> = post.iter().map(|e| e.weight).collect();
    let mut cols = vec![
        (
            "projection".to_string(),
            post.iter().map(|e| e.projection).collect::<Vec<_>>(),
        ),
        (
            "event_time".into(),
            post.iter().map(|e| (e.period - e.group) as f64).collect(),
        ),
    ];
    for j in 0..k {
        cols.push((
            format!("x:{}", data.meta().x_names[j]),
            post.iter()
                .map(|e| data.x_at(e.unit, e.period, j))
                .collect(),
        ));
    }
    for j in 0..data.n_z() {
        cols.push((
            format!("z:{}", data.meta().z_names[j]),
            post.iter().map(|e| data.z()[(e.unit, j)]).collect(),
        ));
    }
    let oracle = oracle.map(|o| {
        let weighted_att = post
            .iter()
            .map(|e| e.weight * o[(e.unit, e.period - 1)] / sizes[&e.group] as f64)
            .sum::<f64>();
        OracleAttribution {
            weighted_att,
            bias: fit.alpha - weighted_att,
        }
    });
    Ok(DecompositionReport {
        mode: TwfeMode::MultiPeriod,
        alpha: fit.alpha,
        reconstructed_alpha: reconstructed,
        terms,
        cells: cells
            .into_iter()
            .map(
                |((g, t), (mean_weight, contribution, post))| CellContribution {
                    g,
                    t,
                    post,
                    mean_weight,
                    contribution,
                },
            )
            .collect(),
        census: census(&ws, &cols),
        reversal: None,
        reference: Some(reference),
        oracle,
    })
}
