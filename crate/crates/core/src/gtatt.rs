//! Group-time average treatment effects by regression adjustment, inverse
//! probability weighting and the doubly robust combination, plus the overall
//! and event-study aggregations.
//!
//! For a cell `(g, t)` with base period `b` (`g - 1` by default) the outcome
//! path is `Y_t - Y_b` and the nuisance regressors are
//! `(1, X_t - X_b, X_b, Z)`. Every estimate carries its influence column,
//! which is rebuilt from the stored nuisance coefficients.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::linproj::project;
use crate::panel::{ComparisonGroup, PanelDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ra,
    Ipw,
    Dr,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ra" => Ok(Method::Ra),
            "ipw" => Ok(Method::Ipw),
            "dr" => Ok(Method::Dr),
            _ => Err(Error::InvalidConfig(format!("unknown method {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasePeriod {
    /// Period `g - 1`.
    #[default]
    Varying,
    /// Period 1 for every cell.
    Universal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Logit,
    Probit,
}

/// Which regressor blocks enter a nuisance model. The intercept is always in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub change: bool,
    pub level: bool,
    pub z: bool,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        Self {
            change: true,
            level: true,
            z: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub comparison: ComparisonGroup,
    pub base_period: BasePeriod,
    pub link: Link,
    /// Comparison units with fitted score above `1 - trim` raise an error.
    pub trim: f64,
    pub or_covariates: CovariateSpec,
    pub gps_covariates: CovariateSpec,
    pub max_iter: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            comparison: ComparisonGroup::NotYetTreated,
            base_period: BasePeriod::Varying,
            link: Link::Logit,
            trim: 1e-4,
            or_covariates: CovariateSpec::default(),
            gps_covariates: CovariateSpec::default(),
            max_iter: 100,
        }
    }
}

/// Outcome path and membership masks for one cell.
#[derive(Debug, Clone)]
pub struct Cell {
    pub g: usize,
    pub t: usize,
    pub base: usize,
    pub dy: DVector<f64>,
    pub treated: Vec<bool>,
    pub comparison: Vec<bool>,
    pub n_treated: usize,
    pub n_comparison: usize,
}

pub fn cell(data: &PanelDataset, g: usize, t: usize, cfg: &EstimatorConfig) -> Result<Cell> {
    if g < 2 || g > data.n_periods() || t < g || t > data.n_periods() {
        return Err(Error::InvalidCell { g, t });
    }
    let base = match cfg.base_period {
        BasePeriod::Varying => g - 1,
        BasePeriod::Universal => 1,
    };
    let n = data.n_units();
    let treated: Vec<bool> = (0..n).map(|i| data.group(i) == g).collect();
    let comparison: Vec<bool> = (0..n)
        .map(|i| cfg.comparison.includes(data, i, t))
        .collect();
    let n_treated = treated.iter().filter(|&&b| b).count();
    let n_comparison = comparison.iter().filter(|&&b| b).count();
    if n_treated == 0 {
        return Err(Error::EmptyTreated { g, t });
    }
    if n_comparison == 0 {
        return Err(Error::EmptyComparison { g, t });
    }
    let dy = DVector::from_fn(n, |i, _| data.y(i, t) - data.y(i, base));
    Ok(Cell {
        g,
        t,
        base,
        dy,
        treated,
        comparison,
        n_treated,
        n_comparison,
    })
}

/// Nuisance design `(1, X_t - X_b, X_b, Z)` restricted to the chosen blocks.
pub fn design(data: &PanelDataset, c: &Cell, spec: &CovariateSpec) -> DMatrix<f64> {
    let n = data.n_units();
    let k = data.n_x();
    let l = data.n_z();
    let p = 1
        + if spec.change { k } else { 0 }
        + if spec.level { k } else { 0 }
        + if spec.z { l } else { 0 };
    let mut w = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut col = 0;
        w[(i, col)] = 1.0;
        col += 1;
        if spec.change {
            for j in 0..k {
                w[(i, col)] = data.x_at(i, c.t, j) - data.x_at(i, c.base, j);
                col += 1;
            }
        }
        if spec.level {
            for j in 0..k {
                w[(i, col)] = data.x_at(i, c.base, j);
                col += 1;
            }
        }
        if spec.z {
            for j in 0..l {
                w[(i, col)] = data.z()[(i, j)];
                col += 1;
            }
        }
    }
    w
}

/// Fitted generalized propensity score for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsFit {
    pub g: usize,
    pub t: usize,
    pub base: usize,
    pub link: Link,
    pub comparison: ComparisonGroup,
    pub covariates: CovariateSpec,
    pub coefficients: Vec<f64>,
    /// Predicted score for every unit; only `in_sample` units enter the fit.
    pub fitted: Vec<f64>,
    pub in_sample: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Largest absolute mean score at the solution.
    pub max_abs_score: f64,
    pub min_fitted: f64,
    pub max_fitted: f64,
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Per-observation quantities of a binary-choice model at linear index `eta`.
struct LinkEval {
    p: f64,
    /// `log P(y | eta)`.
    ll: f64,
    /// Derivative of the log-likelihood contribution with respect to `eta`.
    score: f64,
    /// Fisher information weight.
    info: f64,
    /// `p / (1 - p)` and its derivative with respect to `eta`.
    odds: f64,
    d_odds: f64,
}

fn eval_link(link: Link, eta: f64, y: bool) -> LinkEval {
    match link {
        Link::Logit => {
            let p = 1.0 / (1.0 + (-eta).exp());
            let q = 1.0 / (1.0 + eta.exp());
            let ll = if y {
                -(-eta).exp().ln_1p()
            } else {
                -eta.exp().ln_1p()
            };
            let ll = if ll.is_finite() {
                ll
            } else if y {
                eta
            } else {
                -eta
            };
            let yv = if y { 1.0 } else { 0.0 };
            let odds = eta.exp();
            LinkEval {
                p,
                ll,
                score: yv - p,
                info: p * q,
                odds,
                d_odds: odds,
            }
        }
        Link::Probit => {
            let p = norm_cdf(eta);
            let q = norm_sf(eta);
            let phi = norm_pdf(eta);
            let ll = if y {
                p.max(f64::MIN_POSITIVE).ln()
            } else {
                q.max(f64::MIN_POSITIVE).ln()
            };
            let pq = (p * q).max(f64::MIN_POSITIVE);
            let yv = if y { 1.0 } else { 0.0 };
            LinkEval {
                p,
                ll,
                score: (yv - p) * phi / pq,
                info: phi * phi / pq,
                odds: p / q.max(f64::MIN_POSITIVE),
                d_odds: phi / (q * q).max(f64::MIN_POSITIVE),
            }
        }
    }
}

/// Fitted scores closer than this to 0 or 1 indicate separation.
const PINNED: f64 = 1e-10;

fn gps_for_cell(data: &PanelDataset, c: &Cell, cfg: &EstimatorConfig) -> Result<GpsFit> {
    let (g, t) = (c.g, c.t);
    let w = design(data, c, &cfg.gps_covariates);
    let n = data.n_units();
    let in_sample: Vec<bool> = (0..n).map(|i| c.treated[i] || c.comparison[i]).collect();
    let rows: Vec<usize> = (0..n).filter(|&i| in_sample[i]).collect();
    let y: Vec<bool> = rows.iter().map(|&i| c.treated[i]).collect();
    let m = rows.len();
    let p = w.ncols();
    let x = DMatrix::from_fn(m, p, |r, j| w[(rows[r], j)]);
    // rank check on the estimation sample
    let yv = DVector::from_fn(m, |r, _| if y[r] { 1.0 } else { 0.0 });
    if let Err(e) = project(&yv, &x, None) {
        return Err(match e {
            Error::RankDeficient { columns, .. } => Error::RankDeficientGps { g, t, columns },
            other => other,
        });
    }
    let share = c.n_treated as f64 / m as f64;
    let mut phi = DVector::zeros(p);
    phi[0] = match cfg.link {
        Link::Logit => (share / (1.0 - share)).ln(),
        Link::Probit => statrs::distribution::ContinuousCDF::inverse_cdf(
            &statrs::distribution::Normal::standard(),
            share,
        ),
    };
    let loglik = |phi: &DVector<f64>| -> f64 {
        let eta = &x * phi;
        (0..m).map(|r| eval_link(cfg.link, eta[r], y[r]).ll).sum()
    };
    let mut ll = loglik(&phi);
    let mut converged = false;
    let mut iterations = 0;
    let mut separated = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        let eta = &x * &phi;
        let mut score = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for r in 0..m {
            let e = eval_link(cfg.link, eta[r], y[r]);
            let xr = x.row(r);
            for a in 0..p {
                score[a] += e.score * xr[a];
                for b in 0..=a {
                    info[(a, b)] += e.info * xr[a] * xr[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => {
                separated = true;
                break;
            }
        };
        let mut scale = 1.0;
        let mut next = &phi + &step;
        let mut next_ll = loglik(&next);
        while !(next_ll >= ll - 1e-12 * ll.abs()) && scale > 1e-10 {
            scale *= 0.5;
            next = &phi + &step * scale;
            next_ll = loglik(&next);
        }
        let change = (&step * scale).amax();
        phi = next;
        ll = next_ll;
        let eta_max = (&x * &phi).amax();
        if eta_max > 35.0 {
            separated = true;
            break;
        }
        if change <= 1e-10 * (1.0 + phi.amax()) {
            converged = true;
            break;
        }
    }
    let eta_all = &w * &phi;
    let fitted: Vec<f64> = eta_all
        .iter()
        .map(|&e| eval_link(cfg.link, e, true).p)
        .collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in &rows {
        lo = lo.min(fitted[i]);
        hi = hi.max(fitted[i]);
    }
    if separated || lo < PINNED || hi > 1.0 - PINNED {
        return Err(Error::PerfectSeparation { g, t });
    }
    let mut score = DVector::<f64>::zeros(p);
    for (r, &i) in rows.iter().enumerate() {
        let e = eval_link(cfg.link, eta_all[i], y[r]);
        score += x.row(r).transpose() * e.score;
    }
    Ok(GpsFit {
        g,
        t,
        base: c.base,
        link: cfg.link,
        comparison: cfg.comparison,
        covariates: cfg.gps_covariates,
        coefficients: phi.iter().copied().collect(),
        fitted,
        in_sample,
        converged,
        iterations,
        log_likelihood: ll,
        max_abs_score: score.amax() / m as f64,
        min_fitted: lo,
        max_fitted: hi,
    })
}

/// Maximum-likelihood fit of `P(G = g | W, G = g or comparison at t)`.
pub fn fit_gps(data: &PanelDataset, g: usize, t: usize, cfg: &EstimatorConfig) -> Result<GpsFit> {
    let c = cell(data, g, t, cfg)?;
    gps_for_cell(data, &c, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsSummary {
    pub link: Link,
    pub coefficients: Vec<f64>,
    pub min_fitted: f64,
    pub max_fitted: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl From<&GpsFit> for GpsSummary {
    fn from(f: &GpsFit) -> Self {
        Self {
            link: f.link,
            coefficients: f.coefficients.clone(),
            min_fitted: f.min_fitted,
            max_fitted: f.max_fitted,
            converged: f.converged,
            iterations: f.iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTimeResult {
    pub g: usize,
    pub t: usize,
    pub base: usize,
    pub method: Method,
    pub estimate: f64,
    pub n_treated: usize,
    pub n_comparison: usize,
    /// Centered influence values for every unit.
    pub influence: Vec<f64>,
    /// Outcome regression coefficients on `design(.., or_covariates)`.
    pub or_coefficients: Option<Vec<f64>>,
    pub gps: Option<GpsSummary>,
    pub config: EstimatorConfig,
}

impl GroupTimeResult {
    /// `sqrt(mean(ψ²) / n)`.
    pub fn analytic_se(&self) -> f64 {
        let n = self.influence.len() as f64;
        (self.influence.iter().map(|v| v * v).sum::<f64>() / n / n).sqrt()
    }
}

fn or_fit(data: &PanelDataset, c: &Cell, cfg: &EstimatorConfig) -> Result<DVector<f64>> {
    let w = design(data, c, &cfg.or_covariates);
    match project(&c.dy, &w, Some(&c.comparison)) {
        Ok(f) => Ok(f.coefficients),
        Err(Error::RankDeficient { columns, .. }) => Err(Error::RankDeficientOr {
            g: c.g,
            t: c.t,
            columns,
        }),
        Err(e) => Err(e),
    }
}

fn check_overlap(c: &Cell, gps: &GpsFit, trim: f64) -> Result<()> {
    let max_score = (0..c.dy.len())
        .filter(|&i| c.comparison[i])
        .map(|i| gps.fitted[i])
        .fold(0.0, f64::max);
    if max_score > 1.0 - trim {
        return Err(Error::OverlapViolation {
            g: c.g,
            t: c.t,
            max_score,
        });
    }
    Ok(())
}

/// Regression adjustment: mean over the cohort of `ΔY - m̂(W)`, with `m̂`
/// fit on the comparison units.
pub fn att_gt_ra(
    data: &PanelDataset,
    g: usize,
    t: usize,
    cfg: &EstimatorConfig,
) -> Result<GroupTimeResult> {
    let c = cell(data, g, t, cfg)?;
    let lambda = or_fit(data, &c, cfg)?;
    let w = design(data, &c, &cfg.or_covariates);
    let m = &w * &lambda;
    let estimate = (0..c.dy.len())
        .filter(|&i| c.treated[i])
        .map(|i| c.dy[i] - m[i])
        .sum::<f64>()
        / c.n_treated as f64;
    finish(data, &c, Method::Ra, estimate, Some(lambda), None, cfg)
}

fn gps_matches(gps: &GpsFit, c: &Cell, cfg: &EstimatorConfig) -> Result<()> {
    if gps.g != c.g || gps.t != c.t || gps.base != c.base || gps.comparison != cfg.comparison {
        return Err(Error::ConfigMismatch(format!(
            "score fitted for cell ({}, {}) used for cell ({}, {})",
            gps.g, gps.t, c.g, c.t
        )));
    }
    Ok(())
}

/// Hájek inverse probability weighting with comparison weights `p̂/(1-p̂)`.
pub fn att_gt_ipw(
    data: &PanelDataset,
    g: usize,
    t: usize,
    gps: &GpsFit,
    cfg: &EstimatorConfig,
) -> Result<GroupTimeResult> {
    let c = cell(data, g, t, cfg)?;
    gps_matches(gps, &c, cfg)?;
    check_overlap(&c, gps, cfg.trim)?;
    let n = c.dy.len();
    let mu1 = (0..n)
        .filter(|&i| c.treated[i])
        .map(|i| c.dy[i])
        .sum::<f64>()
        / c.n_treated as f64;
    let (mut s, mut sw) = (0.0, 0.0);
    for i in (0..n).filter(|&i| c.comparison[i]) {
        let r = gps.fitted[i] / (1.0 - gps.fitted[i]);
        s += r * c.dy[i];
        sw += r;
    }
    finish(data, &c, Method::Ipw, mu1 - s / sw, None, Some(gps), cfg)
}

/// Doubly robust: regression-adjusted paths, re-weighted like IPW on the
/// comparison side.
pub fn att_gt_dr(
    data: &PanelDataset,
    g: usize,
    t: usize,
    cfg: &EstimatorConfig,
) -> Result<GroupTimeResult> {
    let c = cell(data, g, t, cfg)?;
    let gps = gps_for_cell(data, &c, cfg)?;
    check_overlap(&c, &gps, cfg.trim)?;
    let lambda = or_fit(data, &c, cfg)?;
    let w = design(data, &c, &cfg.or_covariates);
    let e = &c.dy - &w * &lambda;
    let n = c.dy.len();
    let mu1 = (0..n).filter(|&i| c.treated[i]).map(|i| e[i]).sum::<f64>() / c.n_treated as f64;
    let (mut s, mut sw) = (0.0, 0.0);
    for i in (0..n).filter(|&i| c.comparison[i]) {
        let r = gps.fitted[i] / (1.0 - gps.fitted[i]);
        s += r * e[i];
        sw += r;
    }
    finish(
        data,
        &c,
        Method::Dr,
        mu1 - s / sw,
        Some(lambda),
        Some(&gps),
        cfg,
    )
}

fn finish(
    data: &PanelDataset,
    c: &Cell,
    method: Method,
    estimate: f64,
    lambda: Option<DVector<f64>>,
    gps: Option<&GpsFit>,
    cfg: &EstimatorConfig,
) -> Result<GroupTimeResult> {
    if !estimate.is_finite() {
        return Err(Error::DegenerateDenominator);
    }
    let mut r = GroupTimeResult {
        g: c.g,
        t: c.t,
        base: c.base,
        method,
        estimate,
        n_treated: c.n_treated,
        n_comparison: c.n_comparison,
        influence: Vec::new(),
        or_coefficients: lambda.map(|l| l.iter().copied().collect()),
        gps: gps.map(GpsSummary::from),
        config: *cfg,
    };
    r.influence = build_influence_cell(&r, data, c)?;
    Ok(r)
}

/// Rebuild the influence column of a result from its stored nuisance fits.
pub fn build_influence(result: &GroupTimeResult, data: &PanelDataset) -> Result<Vec<f64>> {
    let c = cell(data, result.g, result.t, &result.config)?;
    build_influence_cell(result, data, &c)
}

fn center(mut v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    v
}

fn build_influence_cell(
    result: &GroupTimeResult,
    data: &PanelDataset,
    c: &Cell,
) -> Result<Vec<f64>> {
    let n = data.n_units();
    let nf = n as f64;
    let pi_g = c.n_treated as f64 / nf;
    let cfg = &result.config;
    let tau = result.estimate;

    // outcome regression pieces
    let or = match result.method {
        Method::Ra | Method::Dr => {
            let lambda = result
                .or_coefficients
                .as_ref()
                .ok_or(Error::MissingNuisance("outcome regression"))?;
            let w = design(data, c, &cfg.or_covariates);
            if lambda.len() != w.ncols() {
                return Err(Error::ConfigMismatch(
                    "outcome coefficients do not match the design".into(),
                ));
            }
            let e = &c.dy - &w * DVector::from_column_slice(lambda);
            let mut mm = DMatrix::<f64>::zeros(w.ncols(), w.ncols());
            for i in (0..n).filter(|&i| c.comparison[i]) {
                let wi = w.row(i);
                mm += wi.transpose() * wi;
            }
            mm /= nf;
            Some((w, e, mm))
        }
        Method::Ipw => None,
    };
    // propensity pieces: per-unit odds and d(odds)/d(index)
    let gps = match result.method {
        Method::Ipw | Method::Dr => {
            let s = result
                .gps
                .as_ref()
                .ok_or(Error::MissingNuisance("propensity score"))?;
            let w = design(data, c, &cfg.gps_covariates);
            if s.coefficients.len() != w.ncols() {
                return Err(Error::ConfigMismatch(
                    "score coefficients do not match the design".into(),
                ));
            }
            let eta = &w * DVector::from_column_slice(&s.coefficients);
            let evals: Vec<LinkEval> = (0..n)
                .map(|i| eval_link(s.link, eta[i], c.treated[i]))
                .collect();
            let mut h = DMatrix::<f64>::zeros(w.ncols(), w.ncols());
            for i in (0..n).filter(|&i| c.treated[i] || c.comparison[i]) {
                let wi = w.row(i);
                h += wi.transpose() * wi * evals[i].info;
            }
            h /= nf;
            Some((w, evals, h))
        }
        Method::Ra => None,
    };

    let mut psi = vec![0.0; n];
    match result.method {
        Method::Ra => {
            let (w, e, mm) = or.as_ref().expect("outcome pieces");
            let wbar = mean_rows(w, &c.treated);
            let a = solve_sym(mm, &wbar)?;
            for i in 0..n {
                if c.treated[i] {
                    psi[i] += (e[i] - tau) / pi_g;
                }
                if c.comparison[i] {
                    psi[i] -= a.dot(&w.row(i).transpose()) * e[i];
                }
            }
        }
        Method::Ipw | Method::Dr => {
            let (wp, evals, h) = gps.as_ref().expect("score pieces");
            // residual path used on both sides
            let path: DVector<f64> = match &or {
                Some((_, e, _)) => e.clone(),
                None => c.dy.clone(),
            };
            let mu1 = (0..n)
                .filter(|&i| c.treated[i])
                .map(|i| path[i])
                .sum::<f64>()
                / c.n_treated as f64;
            let sw = (0..n)
                .filter(|&i| c.comparison[i])
                .map(|i| evals[i].odds)
                .sum::<f64>()
                / nf;
            let mu0 = (0..n)
                .filter(|&i| c.comparison[i])
                .map(|i| evals[i].odds * path[i])
                .sum::<f64>()
                / nf
                / sw;
            // sensitivity of the comparison mean to the score coefficients
            let mut a = DVector::<f64>::zeros(wp.ncols());
            for i in (0..n).filter(|&i| c.comparison[i]) {
                a += wp.row(i).transpose() * (evals[i].d_odds * (path[i] - mu0));
            }
            a /= nf * sw;
            let b = solve_sym(h, &a)?;
            for i in 0..n {
                if c.treated[i] {
                    psi[i] += (path[i] - mu1) / pi_g;
                }
                if c.comparison[i] {
                    psi[i] -= evals[i].odds * (path[i] - mu0) / sw;
                }
                if c.treated[i] || c.comparison[i] {
                    psi[i] -= b.dot(&wp.row(i).transpose()) * evals[i].score;
                }
            }
            if let Some((w, e, mm)) = &or {
                let wbar = mean_rows(w, &c.treated);
                let mut wc = DVector::<f64>::zeros(w.ncols());
                for i in (0..n).filter(|&i| c.comparison[i]) {
                    wc += w.row(i).transpose() * evals[i].odds;
                }
                wc /= nf * sw;
                let a = solve_sym(mm, &(wbar - wc))?;
                for i in (0..n).filter(|&i| c.comparison[i]) {
                    psi[i] -= a.dot(&w.row(i).transpose()) * e[i];
                }
            }
        }
    }
    Ok(center(psi))
}

fn mean_rows(w: &DMatrix<f64>, mask: &[bool]) -> DVector<f64> {
    let mut s = DVector::zeros(w.ncols());
    let mut m = 0.0;
    for i in (0..w.nrows()).filter(|&i| mask[i]) {
        s += w.row(i).transpose();
        m += 1.0;
    }
    s / m
}

fn solve_sym(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.solve(b))
        .or_else(|| m.clone().lu().solve(b))
        .ok_or(Error::RankDeficient {
            columns: (0..m.ncols()).collect(),
            condition: f64::INFINITY,
        })
}

/// Every post-treatment cell `(g, t)` in order.
pub fn post_cells(data: &PanelDataset) -> Vec<(usize, usize)> {
    data.treated_groups()
        .into_iter()
        .flat_map(|g| (g..=data.n_periods()).map(move |t| (g, t)))
        .collect()
}

pub fn att_gt(
    data: &PanelDataset,
    g: usize,
    t: usize,
    method: Method,
    cfg: &EstimatorConfig,
) -> Result<GroupTimeResult> {
    match method {
        Method::Ra => att_gt_ra(data, g, t, cfg),
        Method::Ipw => {
            let gps = fit_gps(data, g, t, cfg)?;
            att_gt_ipw(data, g, t, &gps, cfg)
        }
        Method::Dr => att_gt_dr(data, g, t, cfg),
    }
}

/// Estimate every post-treatment cell; cells run concurrently.
pub fn estimate_all(
    data: &PanelDataset,
    method: Method,
    cfg: &EstimatorConfig,
    exec: Execution,
) -> Result<Vec<GroupTimeResult>> {
    let cells = post_cells(data);
    if cells.is_empty() {
        return Err(Error::NoResults);
    }
    try_map_indexed(exec, cells.len(), |k| {
        att_gt(data, cells[k].0, cells[k].1, method, cfg)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "e")]
pub enum AggregateKind {
    Overall,
    EventStudy(i64),
}

impl AggregateKind {
    pub fn label(&self) -> String {
        match self {
            AggregateKind::Overall => "overall".into(),
            AggregateKind::EventStudy(e) => format!("es_{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateComponent {
    pub g: usize,
    pub t: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub kind: AggregateKind,
    pub estimate: f64,
    pub influence: Vec<f64>,
    pub components: Vec<AggregateComponent>,
}

fn index_results(
    results: &[GroupTimeResult],
) -> Result<BTreeMap<(usize, usize), &GroupTimeResult>> {
    if results.is_empty() {
        return Err(Error::NoResults);
    }
    Ok(results.iter().map(|r| ((r.g, r.t), r)).collect())
}

/// Combine cell influences with fixed weights and add the share-estimation
/// term `Σ_g θ_g (1{G=g} - s_g 1{G in E}) / P(G in E)`.
fn combine(
    data: &PanelDataset,
    comps: &[(&GroupTimeResult, f64)],
    group_means: &[(usize, f64, f64)],
) -> Result<Vec<f64>> {
    let n = data.n_units();
    let mut psi = vec![0.0; n];
    for (r, w) in comps {
        if r.influence.len() != n {
            return Err(Error::InconsistentInfluence);
        }
        for i in 0..n {
            psi[i] += w * r.influence[i];
        }
    }
    let eligible: Vec<usize> = group_means.iter().map(|x| x.0).collect();
    let n_e = (0..n)
        .filter(|&i| eligible.contains(&data.group(i)))
        .count() as f64;
    let pi_e = n_e / n as f64;
    for i in 0..n {
        let gi = data.group(i);
        if !eligible.contains(&gi) {
            continue;
        }
        for &(g, share, theta) in group_means {
            let ind = if gi == g { 1.0 } else { 0.0 };
            psi[i] += theta * (ind - share) / pi_e;
        }
    }
    Ok(center(psi))
}

/// `Σ_g p̄_g · mean_{t >= g} ATT(g, t)`.
pub fn aggregate_overall(
    results: &[GroupTimeResult],
    data: &PanelDataset,
) -> Result<AggregateResult> {
    let idx = index_results(results)?;
    let pbar = data.conditional_group_shares();
    let tt = data.n_periods();
    let mut comps = Vec::new();
    let mut group_means = Vec::new();
    let mut estimate = 0.0;
    for (&g, &share) in &pbar {
        let span = (tt + 1 - g) as f64;
        let mut theta = 0.0;
        for t in g..=tt {
            let r = idx.get(&(g, t)).ok_or(Error::MissingGroupTime { g, t })?;
            comps.push((*r, share / span));
            theta += r.estimate / span;
        }
        estimate += share * theta;
        group_means.push((g, share, theta));
    }
    let influence = combine(data, &comps, &group_means)?;
    Ok(AggregateResult {
        kind: AggregateKind::Overall,
        estimate,
        influence,
        components: comps
            .iter()
            .map(|(r, w)| AggregateComponent {
                g: r.g,
                t: r.t,
                weight: *w,
            })
            .collect(),
    })
}

/// Average of `ATT(g, g+e)` over groups observed `e` periods after adoption,
/// weighted by their relative sizes.
pub fn aggregate_event_study(
    results: &[GroupTimeResult],
    data: &PanelDataset,
    e: i64,
) -> Result<AggregateResult> {
    let idx = index_results(results)?;
    if e < 0 {
        return Err(Error::NoEligibleGroup(e));
    }
    let tt = data.n_periods();
    let eligible: Vec<usize> = data
        .treated_groups()
        .into_iter()
        .filter(|&g| g + e as usize <= tt)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleGroup(e));
    }
    let total: usize = eligible.iter().map(|&g| data.group_size(g)).sum();
    let mut comps = Vec::new();
    let mut group_means = Vec::new();
    let mut estimate = 0.0;
    for &g in &eligible {
        let t = g + e as usize;
        let r = idx.get(&(g, t)).ok_or(Error::MissingGroupTime { g, t })?;
        let share = data.group_size(g) as f64 / total as f64;
        comps.push((*r, share));
        estimate += share * r.estimate;
        group_means.push((g, share, r.estimate));
    }
    let influence = combine(data, &comps, &group_means)?;
    Ok(AggregateResult {
        kind: AggregateKind::EventStudy(e),
        estimate,
        influence,
        components: comps
            .iter()
            .map(|(r, w)| AggregateComponent {
                g: r.g,
                t: r.t,
                weight: *w,
            })
            .collect(),
    })
}

/// Event-study aggregates for every event time with an eligible group.
pub fn aggregate_event_studies(
    results: &[GroupTimeResult],
    data: &PanelDataset,
) -> Result<Vec<AggregateResult>> {
    let max_e = data
        .treated_groups()
        .first()
        .map_or(0, |&g| data.n_periods() - g);
    (0..=max_e as i64)
        .map(|e| aggregate_event_study(results, data, e))
        .collect()
}
