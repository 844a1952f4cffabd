//! Synthetic staggered-adoption panels with known treatment effects.
//!
//! Untreated outcomes follow
//! `Y(0)_t = θ_t + Z'δ_t + X_t'β_t + η + Σ_{s≤t} (ΔX_s'λ_s + a·ΔX_s²) + v_t`
//! and treated outcomes add `τ = base + slope·(t-g) + X_t'κ_x + Z'κ_z`.
//! Covariates follow `X_t = ρX_{t-1} + d_G + ε_t`. The cohort is drawn
//! from a multinomial logit on `(X_1, Z)`.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::twfe::ConditionalAtts;

/// Assignment probabilities must stay inside `(OVERLAP_EPS, 1 - OVERLAP_EPS)`.
pub const OVERLAP_EPS: f64 = 1e-4;

/// One cohort of the assignment model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    /// First treated period, `None` for never treated.
    pub g: Option<usize>,
    pub intercept: f64,
    /// Logit coefficients on baseline `X_1`.
    pub x_coef: Vec<f64>,
    pub z_coef: Vec<f64>,
    /// Mean of the unit effect.
    pub eta_mean: f64,
    /// Per-period drift of each covariate.
    pub drift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XProcess {
    pub rho: f64,
    pub init_mean: f64,
    pub init_sd: f64,
    pub innovation_sd: f64,
}

impl Default for XProcess {
    fn default() -> Self {
        Self {
            rho: 1.0,
            init_mean: 0.0,
            init_sd: 1.0,
            innovation_sd: 1.0,
        }
    }
}

/// Untreated outcome model; per-period vectors are indexed by period - 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub theta: Vec<f64>,
    /// `T × l`.
    pub delta: Vec<Vec<f64>>,
    /// `T × k`.
    pub beta: Vec<Vec<f64>>,
    /// `T × k`, the first row is unused.
    pub lambda: Vec<Vec<f64>>,
    pub nonlinear_amplitude: f64,
    pub noise_sd: f64,
    /// Noise sd is scaled by `1 + heteroskedasticity·|Z_1|`.
    #[serde(default)]
    pub heteroskedasticity: f64,
    pub eta_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectModel {
    pub base: f64,
    pub event_slope: f64,
    pub x_interaction: Vec<f64>,
    pub z_interaction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_units: usize,
    pub n_periods: usize,
    pub n_x: usize,
    pub n_z: usize,
    pub seed: u64,
    pub groups: Vec<GroupSpec>,
    pub x_process: XProcess,
    pub outcome: OutcomeModel,
    pub effect: EffectModel,
    /// Draws for the Monte Carlo oracle.
    pub oracle_draws: usize,
}

impl DgpConfig {
    /// `T` periods, `k` covariates, `l` time-invariant covariates, cohorts
    /// `2..=T` plus never treated, no selection and a constant effect.
    pub fn simple(n_units: usize, t: usize, k: usize, l: usize, seed: u64) -> Self {
        let groups = (2..=t)
            .map(Some)
            .chain(std::iter::once(None))
            .map(|g| GroupSpec {
                g,
                intercept: 0.0,
                x_coef: vec![0.0; k],
                z_coef: vec![0.0; l],
                eta_mean: 0.0,
                drift: vec![0.0; k],
            })
            .collect();
        Self {
            n_units,
            n_periods: t,
            n_x: k,
            n_z: l,
            seed,
            groups,
            x_process: XProcess::default(),
            outcome: OutcomeModel {
                theta: (0..t).map(|s| s as f64).collect(),
                delta: vec![vec![1.0; l]; t],
                beta: vec![vec![1.0; k]; t],
                lambda: vec![vec![0.0; k]; t],
                nonlinear_amplitude: 0.0,
                noise_sd: 1.0,
                heteroskedasticity: 0.0,
                eta_sd: 1.0,
            },
            effect: EffectModel {
                base: 2.0,
                event_slope: 0.0,
                x_interaction: vec![0.0; k],
                z_interaction: vec![0.0; l],
            },
            oracle_draws: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let (t, k, l) = (self.n_periods, self.n_x, self.n_z);
        if t < 2 || self.n_units == 0 {
            return bad("need at least two periods and one unit");
        }
        if self.groups.is_empty() {
            return bad("no cohorts");
        }
        let mut seen = Vec::new();
        for gs in &self.groups {
            if let Some(g) = gs.g {
                if !(2..=t).contains(&g) {
                    return bad(&format!("cohort {g} outside 2..={t}"));
                }
            }
            if seen.contains(&gs.g) {
                return bad("duplicate cohort");
            }
            seen.push(gs.g);
            if gs.x_coef.len() != k || gs.drift.len() != k || gs.z_coef.len() != l {
                return bad("cohort coefficient length");
            }
        }
        let o = &self.outcome;
        if o.theta.len() != t || o.delta.len() != t || o.beta.len() != t || o.lambda.len() != t {
            return bad("outcome model needs one entry per period");
        }
        if o.delta.iter().any(|d| d.len() != l)
            || o.beta.iter().chain(&o.lambda).any(|b| b.len() != k)
        {
            return bad("outcome coefficient length");
        }
        if self.effect.x_interaction.len() != k || self.effect.z_interaction.len() != l {
            return bad("effect interaction length");
        }
        if !(o.noise_sd >= 0.0
            && o.eta_sd >= 0.0
            && self.x_process.init_sd >= 0.0
            && self.x_process.innovation_sd >= 0.0)
        {
            return bad("negative scale");
        }
        Ok(())
    }

    fn stored_group(&self, g: Option<usize>) -> usize {
        g.unwrap_or(self.n_periods + 1)
    }

    fn effect_free(&self) -> bool {
        self.effect
            .x_interaction
            .iter()
            .chain(&self.effect.z_interaction)
            .all(|&c| c == 0.0)
    }

    fn assignment_free(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.x_coef.iter().chain(&g.z_coef).all(|&c| c == 0.0))
    }

    fn tau(&self, g: usize, t: usize, x_t: &[f64], z: &[f64]) -> f64 {
        let e = &self.effect;
        e.base
            + e.event_slope * (t - g) as f64
            + x_t
                .iter()
                .zip(&e.x_interaction)
                .map(|(a, b)| a * b)
                .sum::<f64>()
            + z.iter()
                .zip(&e.z_interaction)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum OracleMethod {
    Analytic,
    MonteCarlo { draws: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    /// Zero for analytic values.
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCell {
    pub g: usize,
    pub t: usize,
    pub att: OracleValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEventTime {
    pub e: usize,
    pub att: OracleValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpOracle {
    pub method: OracleMethod,
    pub cells: Vec<OracleCell>,
    pub overall: OracleValue,
    pub event_study: Vec<OracleEventTime>,
}

impl DgpOracle {
    pub fn att(&self, g: usize, t: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.g == g && c.t == t)
            .map(|c| c.att.value)
    }

    pub fn event(&self, e: usize) -> Option<f64> {
        self.event_study
            .iter()
            .find(|c| c.e == e)
            .map(|c| c.att.value)
    }
}

/// A generated panel together with its untreated potential outcomes.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: PanelDataset,
    pub oracle: DgpOracle,
    pub y0: DMatrix<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Softmax assignment probabilities for one unit.
fn assignment_probs(cfg: &DgpConfig, x1: &[f64], z: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = cfg
        .groups
        .iter()
        .map(|gs| {
            gs.intercept
                + gs.x_coef.iter().zip(x1).map(|(a, b)| a * b).sum::<f64>()
                + gs.z_coef.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_overlap(cfg: &DgpConfig, p: &[f64]) -> Result<()> {
    if cfg.groups.len() < 2 {
        return Ok(());
    }
    if let Some((j, v)) = p
        .iter()
        .enumerate()
        .find(|(_, &v)| v <= OVERLAP_EPS || v >= 1.0 - OVERLAP_EPS)
    {
        return Err(Error::OverlapConfigError(format!(
            "probability {v:.3e} for cohort {:?} leaves ({OVERLAP_EPS}, {})",
            cfg.groups[j].g,
            1.0 - OVERLAP_EPS
        )));
    }
    Ok(())
}

/// Covariate path, `Z` and cohort index for one unit.
struct UnitDraw {
    x: Vec<Vec<f64>>,
    z: Vec<f64>,
    cohort: usize,
}

fn draw_unit(cfg: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<UnitDraw> {
    let (t, k, l) = (cfg.n_periods, cfg.n_x, cfg.n_z);
    let xp = &cfg.x_process;
    let x1: Vec<f64> = (0..k)
        .map(|_| xp.init_mean + xp.init_sd * normal(rng))
        .collect();
    let z: Vec<f64> = (0..l).map(|_| normal(rng)).collect();
    let p = assignment_probs(cfg, &x1, &z);
    check_overlap(cfg, &p)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut cohort = p.len() - 1;
    for (j, pj) in p.iter().enumerate() {
        acc += pj;
        if u < acc {
            cohort = j;
            break;
        }
    }
    let drift = &cfg.groups[cohort].drift;
    let mut x = vec![x1];
    for s in 1..t {
        let prev = &x[s - 1];
        let next: Vec<f64> = (0..k)
            .map(|j| xp.rho * prev[j] + drift[j] + xp.innovation_sd * normal(rng))
            .collect();
        x.push(next);
    }
    Ok(UnitDraw { x, z, cohort })
}

pub fn generate(cfg: &DgpConfig) -> Result<(PanelDataset, DgpOracle)> {
    let s = generate_with_potentials(cfg)?;
    Ok((s.data, s.oracle))
}

pub fn generate_with_potentials(cfg: &DgpConfig) -> Result<Simulation> {
    cfg.validate()?;
    let (n, t, k, l) = (cfg.n_units, cfg.n_periods, cfg.n_x, cfg.n_z);
    let o = &cfg.outcome;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y = DMatrix::zeros(n, t);
    let mut y0 = DMatrix::zeros(n, t);
    let mut xs = vec![DMatrix::zeros(n, t); k];
    let mut z = DMatrix::zeros(n, l);
    let mut group = Vec::with_capacity(n);
    for i in 0..n {
        let u = draw_unit(cfg, &mut rng)?;
        let gs = &cfg.groups[u.cohort];
        let g = cfg.stored_group(gs.g);
        let eta = gs.eta_mean + o.eta_sd * normal(&mut rng);
        let sd = o.noise_sd * (1.0 + o.heteroskedasticity * u.z.first().map_or(0.0, |v| v.abs()));
        let mut path = 0.0;
        for s in 0..t {
            if s > 0 {
                for j in 0..k {
                    let dx = u.x[s][j] - u.x[s - 1][j];
                    path += o.lambda[s][j] * dx + o.nonlinear_amplitude * dx * dx;
                }
            }
            let level = o.theta[s]
                + u.z.iter().zip(&o.delta[s]).map(|(a, b)| a * b).sum::<f64>()
                + u.x[s]
                    .iter()
                    .zip(&o.beta[s])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            let v = sd * normal(&mut rng);
            let untreated = level + eta + path + v;
            y0[(i, s)] = untreated;
            let period = s + 1;
            y[(i, s)] = if period >= g {
                untreated + cfg.tau(g, period, &u.x[s], &u.z)
            } else {
                untreated
            };
            for j in 0..k {
                xs[j][(i, s)] = u.x[s][j];
            }
        }
        for j in 0..l {
            z[(i, j)] = u.z[j];
        }
        group.push(g);
    }
    let data = PanelDataset::new(y, xs, z, group)?;
    let oracle = oracle(cfg)?;
    Ok(Simulation { data, oracle, y0 })
}

/// Analytic oracle when available, Monte Carlo otherwise.
pub fn oracle(cfg: &DgpConfig) -> Result<DgpOracle> {
    if cfg.assignment_free() {
        Ok(analytic_oracle(cfg))
    } else if cfg.effect_free() && cfg.effect.event_slope == 0.0 {
        let mut o = analytic_oracle(cfg);
        // with a constant effect the cohort shares do not matter
        o.overall.value = cfg.effect.base;
        Ok(o)
    } else {
        monte_carlo_oracle(cfg, cfg.oracle_draws)
    }
}

fn treated_cohorts(cfg: &DgpConfig) -> Vec<usize> {
    let mut v: Vec<usize> = cfg.groups.iter().filter_map(|g| g.g).collect();
    v.sort_unstable();
    v
}

/// Closed form for covariate-free assignment or a constant effect.
fn analytic_oracle(cfg: &DgpConfig) -> DgpOracle {
    let t_max = cfg.n_periods;
    let k = cfg.n_x;
    let xp = &cfg.x_process;
    let probs = assignment_probs(cfg, &vec![0.0; k], &vec![0.0; cfg.n_z]);
    let mut cells = Vec::new();
    let mut share: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cell_value: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (gs, p) in cfg.groups.iter().zip(&probs) {
        let Some(g) = gs.g else { continue };
        share.insert(g, *p);
        let mut mean = vec![xp.init_mean; k];
        for t in 1..=t_max {
            if t > 1 {
                for j in 0..k {
                    mean[j] = xp.rho * mean[j] + gs.drift[j];
                }
            }
            if t >= g {
                let v = cfg.tau(g, t, &mean, &vec![0.0; cfg.n_z]);
                cell_value.insert((g, t), v);
            }
        }
    }
    for (&(g, t), &v) in &cell_value {
        cells.push(OracleCell {
            g,
            t,
            att: OracleValue {
                value: v,
                mc_se: 0.0,
            },
        });
    }
    let total: f64 = share.values().sum();
    let overall = share
        .iter()
        .map(|(&g, &s)| {
            let m = (g..=t_max).map(|t| cell_value[&(g, t)]).sum::<f64>() / (t_max + 1 - g) as f64;
            s / total * m
        })
        .sum();
    let event_study = (0..=t_max.saturating_sub(2))
        .filter_map(|e| {
            let elig: Vec<usize> = share.keys().copied().filter(|&g| g + e <= t_max).collect();
            if elig.is_empty() {
                return None;
            }
            let tot: f64 = elig.iter().map(|g| share[g]).sum();
            let v = elig
                .iter()
                .map(|g| share[g] / tot * cell_value[&(*g, g + e)])
                .sum();
            Some(OracleEventTime {
                e,
                att: OracleValue {
                    value: v,
                    mc_se: 0.0,
                },
            })
        })
        .collect();
    DgpOracle {
        method: OracleMethod::Analytic,
        cells,
        overall: OracleValue {
            value: overall,
            mc_se: 0.0,
        },
        event_study,
    }
}

#[derive(Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn value(&self) -> OracleValue {
        if self.n == 0 {
            return OracleValue {
                value: f64::NAN,
                mc_se: f64::NAN,
            };
        }
        let m = self.n as f64;
        let mean = self.sum / m;
        let var = if self.n > 1 {
            ((self.sum_sq - m * mean * mean) / (m - 1.0)).max(0.0)
        } else {
            0.0
        };
        OracleValue {
            value: mean,
            mc_se: (var / m).sqrt(),
        }
    }
}

/// Population oracle from `draws` fresh units on a separate random stream.
///
/// Aggregates are averages of unit-level effect summaries over the
/// relevant treated draws, so their Monte Carlo errors come directly from
/// the spread of those summaries.
pub fn monte_carlo_oracle(cfg: &DgpConfig, draws: usize) -> Result<DgpOracle> {
    cfg.validate()?;
    if draws == 0 {
        return Err(Error::InvalidConfig(
            "oracle needs at least one draw".into(),
        ));
    }
    let t_max = cfg.n_periods;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut cells: BTreeMap<(usize, usize), Moments> = BTreeMap::new();
    let mut events: BTreeMap<usize, Moments> = BTreeMap::new();
    let mut overall = Moments::default();
    for &g in &treated_cohorts(cfg) {
        for t in g..=t_max {
            cells.insert((g, t), Moments::default());
        }
    }
    for _ in 0..draws {
        let u = draw_unit(cfg, &mut rng)?;
        let Some(g) = cfg.groups[u.cohort].g else {
            continue;
        };
        let mut avg = 0.0;
        for t in g..=t_max {
            let v = cfg.tau(g, t, &u.x[t - 1], &u.z);
            cells.get_mut(&(g, t)).expect("cell").push(v);
            events.entry(t - g).or_default().push(v);
            avg += v;
        }
        overall.push(avg / (t_max + 1 - g) as f64);
    }
    Ok(DgpOracle {
        method: OracleMethod::MonteCarlo { draws },
        cells: cells
            .iter()
            .map(|(&(g, t), m)| OracleCell {
                g,
                t,
                att: m.value(),
            })
            .collect(),
        overall: overall.value(),
        event_study: events
            .iter()
            .map(|(&e, m)| OracleEventTime { e, att: m.value() })
            .collect(),
    })
}

/// `τ(G_i, t, X_it, Z_i)` on treated cells, zero elsewhere.
pub fn oracle_conditional_atts(cfg: &DgpConfig, data: &PanelDataset) -> Result<ConditionalAtts> {
    if data.n_periods() != cfg.n_periods || data.n_x() != cfg.n_x || data.n_z() != cfg.n_z {
        return Err(Error::ConfigMismatch(format!(
            "config has T={}, k={}, l={}; panel has T={}, k={}, l={}",
            cfg.n_periods,
            cfg.n_x,
            cfg.n_z,
            data.n_periods(),
            data.n_x(),
            data.n_z()
        )));
    }
    let (n, t_max) = (data.n_units(), data.n_periods());
    let mut out = DMatrix::zeros(n, t_max);
    for i in 0..n {
        let g = data.group(i);
        let z: Vec<f64> = data.z().row(i).iter().copied().collect();
        for t in g..=t_max {
            let x: Vec<f64> = (0..cfg.n_x).map(|j| data.x_at(i, t, j)).collect();
            out[(i, t - 1)] = cfg.tau(g, t, &x, &z);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Clean,
    ViolateATimeinvariant,
    ViolateBLevels,
    ViolateCNonlinear,
    ViolateETimevaryingBeta,
    NegativeWeights,
    WeightReversal,
    HeterogeneousAtt,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Clean,
        Preset::ViolateATimeinvariant,
        Preset::ViolateBLevels,
        Preset::ViolateCNonlinear,
        Preset::ViolateETimevaryingBeta,
        Preset::NegativeWeights,
        Preset::WeightReversal,
        Preset::HeterogeneousAtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Clean => "clean",
            Preset::ViolateATimeinvariant => "violate_A_timeinvariant",
            Preset::ViolateBLevels => "violate_B_levels",
            Preset::ViolateCNonlinear => "violate_C_nonlinear",
            Preset::ViolateETimevaryingBeta => "violate_E_timevarying_beta",
            Preset::NegativeWeights => "negative_weights",
            Preset::WeightReversal => "weight_reversal",
            Preset::HeterogeneousAtt => "heterogeneous_att",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let short = |p: Preset| p.name().split('_').take(2).collect::<Vec<_>>().join("_");
        Preset::ALL
            .into_iter()
            .find(|p| {
                p.name().eq_ignore_ascii_case(s)
                    || (p.name().starts_with("violate") && short(*p).eq_ignore_ascii_case(s))
            })
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

/// Configuration for a named scenario, parsed from its name.
pub fn violation_preset(name: &str) -> Result<DgpConfig> {
    Ok(preset_config(name.parse()?))
}

/// Every preset has one covariate of each kind and `n_units = 1000`.
pub fn preset_config(p: Preset) -> DgpConfig {
    let two = |cfg: &mut DgpConfig| {
        *cfg = DgpConfig::simple(cfg.n_units, 2, 1, 1, cfg.seed);
    };
    let mut c = DgpConfig::simple(1000, 4, 1, 1, 0);
    let eta_by_cohort = |c: &mut DgpConfig| {
        for (j, gs) in c.groups.iter_mut().enumerate() {
            gs.eta_mean = 0.5 * j as f64;
        }
    };
    let select = |c: &mut DgpConfig, x: f64, z: f64| {
        for gs in c.groups.iter_mut().filter(|gs| gs.g.is_some()) {
            gs.x_coef = vec![x];
            gs.z_coef = vec![z];
        }
    };
    let treated_drift = |c: &mut DgpConfig, d: f64| {
        for gs in c.groups.iter_mut().filter(|gs| gs.g.is_some()) {
            gs.drift = vec![d];
        }
    };
    match p {
        Preset::Clean => {
            select(&mut c, 0.5, 0.5);
        }
        Preset::ViolateATimeinvariant => {
            two(&mut c);
            select(&mut c, 0.0, 1.0);
            c.outcome.delta = vec![vec![0.0], vec![1.0]];
        }
        Preset::ViolateBLevels => {
            two(&mut c);
            select(&mut c, 1.0, 0.5);
            c.outcome.beta = vec![vec![1.0], vec![1.5]];
        }
        Preset::ViolateCNonlinear => {
            two(&mut c);
            select(&mut c, 0.5, 0.0);
            treated_drift(&mut c, 1.0);
            c.outcome.nonlinear_amplitude = 0.5;
        }
        Preset::ViolateETimevaryingBeta => {
            select(&mut c, 0.3, 0.3);
            c.outcome.beta = vec![vec![0.0]; 4];
            c.outcome.lambda = vec![vec![0.0], vec![0.0], vec![1.0], vec![2.0]];
            for (gs, d) in c.groups.iter_mut().zip([0.8, 0.4, 0.0, -0.4]) {
                gs.drift = vec![d];
            }
        }
        Preset::NegativeWeights => {
            two(&mut c);
            treated_drift(&mut c, 2.0);
        }
        Preset::WeightReversal => {
            two(&mut c);
            select(&mut c, 0.5, 0.0);
            treated_drift(&mut c, 1.0);
            c.effect.x_interaction = vec![1.0];
        }
        Preset::HeterogeneousAtt => {
            select(&mut c, 0.5, 0.5);
            c.effect.x_interaction = vec![0.5];
            c.effect.z_interaction = vec![0.5];
            c.effect.event_slope = 0.3;
        }
    }
    eta_by_cohort(&mut c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{validate, ValidationOptions};
    use proptest::prelude::*;

    #[test]
    fn zero_effect_gives_zero_oracle() {
        let mut c = preset_config(Preset::HeterogeneousAtt);
        c.effect = EffectModel {
            base: 0.0,
            event_slope: 0.0,
            x_interaction: vec![0.0],
            z_interaction: vec![0.0],
        };
        let o = oracle(&c).unwrap();
        assert!(o.cells.iter().all(|c| c.att.value == 0.0));
        assert_eq!(o.overall.value, 0.0);
    }

    #[test]
    fn constant_effect_is_exact() {
        for p in [
            Preset::Clean,
            Preset::ViolateBLevels,
            Preset::ViolateETimevaryingBeta,
        ] {
            let (_, o) = generate(&preset_config(p)).unwrap();
            assert_eq!(o.method, OracleMethod::Analytic);
            assert!(o.cells.iter().all(|c| c.att.value == 2.0));
            assert_eq!(o.overall.value, 2.0);
        }
    }

    #[test]
    fn analytic_matches_monte_carlo() {
        let mut c = DgpConfig::simple(10, 4, 1, 1, 3);
        c.effect.x_interaction = vec![0.7];
        c.effect.event_slope = 0.4;
        for (gs, d) in c.groups.iter_mut().zip([0.5, -0.2, 0.1, 0.0]) {
            gs.drift = vec![d];
        }
        c.groups[0].intercept = 0.4;
        let a = oracle(&c).unwrap();
        assert_eq!(a.method, OracleMethod::Analytic);
        let m = monte_carlo_oracle(&c, 1_000_000).unwrap();
        for (x, y) in a.cells.iter().zip(&m.cells) {
            assert_eq!((x.g, x.t), (y.g, y.t));
            assert!(
                (x.att.value - y.att.value).abs() < 3.0 * y.att.mc_se,
                "{x:?} {y:?}"
            );
        }
        assert!((a.overall.value - m.overall.value).abs() < 3.0 * m.overall.mc_se);
        for (x, y) in a.event_study.iter().zip(&m.event_study) {
            assert!((x.att.value - y.att.value).abs() < 3.0 * y.att.mc_se);
        }
    }

    #[test]
    fn conditional_atts_are_potential_outcome_differences() {
        let c = preset_config(Preset::HeterogeneousAtt);
        let s = generate_with_potentials(&c).unwrap();
        let taus = oracle_conditional_atts(&c, &s.data).unwrap();
        for i in 0..s.data.n_units() {
            for t in 1..=s.data.n_periods() {
                let diff = s.data.y(i, t) - s.y0[(i, t - 1)];
                assert!((diff - taus[(i, t - 1)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn effect_linear_in_z() {
        let mut c = DgpConfig::simple(200, 2, 1, 1, 4);
        c.effect.base = 1.0;
        c.effect.z_interaction = vec![1.0];
        let (data, _) = generate(&c).unwrap();
        let taus = oracle_conditional_atts(&c, &data).unwrap();
        for i in (0..data.n_units()).filter(|&i| data.group(i) == 2) {
            assert_eq!(taus[(i, 1)], 1.0 + data.z()[(i, 0)]);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (data, _) = generate(&DgpConfig::simple(50, 3, 1, 0, 1)).unwrap();
        assert!(matches!(
            oracle_conditional_atts(&DgpConfig::simple(50, 3, 2, 0, 1), &data),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn extreme_assignment_is_rejected() {
        let mut c = DgpConfig::simple(500, 2, 1, 0, 1);
        c.groups[0].x_coef = vec![12.0];
        assert!(matches!(generate(&c), Err(Error::OverlapConfigError(_))));
    }

    #[test]
    fn presets_parse_and_generate() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
            let (data, o) = generate(&preset_config(p)).unwrap();
            let rep = validate(&data, &ValidationOptions::default());
            assert!(rep.has_never_treated);
            assert!(!o.cells.is_empty());
        }
        assert_eq!(
            "violate_B".parse::<Preset>().unwrap(),
            Preset::ViolateBLevels
        );
        assert!(matches!(
            violation_preset("nope"),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn negative_weights_preset_has_negative_weights() {
        let (data, _) = generate(&preset_config(Preset::NegativeWeights)).unwrap();
        let fit = crate::twfe::fit_auto(&data).unwrap();
        let w = crate::twfe::implicit_weights(&fit, &data).unwrap();
        assert!(w.summary.n_negative > 0);
    }

    #[test]
    fn config_json_round_trip() {
        let c = preset_config(Preset::ViolateETimevaryingBeta);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<DgpConfig>(&s).unwrap(), c);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn same_seed_same_panel(seed in any::<u64>(), t in 2usize..5) {
            let c = DgpConfig { seed, ..preset_config(Preset::HeterogeneousAtt) };
            let c = DgpConfig { n_units: 60, ..if t == 4 { c } else { DgpConfig::simple(60, t, 1, 1, seed) } };
            let a = generate(&c).unwrap();
            let b = generate(&c).unwrap();
            prop_assert_eq!(a.0.outcome(), b.0.outcome());
            prop_assert_eq!(a.0.groups(), b.0.groups());
            prop_assert_eq!(a.1, b.1);
            // absorbing treatment
            let d = a.0.treatment();
            for i in 0..60 {
                for s in 1..t {
                    prop_assert!(d[(i, s)] >= d[(i, s - 1)]);
                }
            }
        }
    }
}
