//! Balanced panels, CSV ingestion and the transforms everything else consumes.
//!
//! Periods are indexed `1..=T` throughout the public API. A unit's group `G_i`
//! is the first period in which it is treated; never-treated units carry
//! `G_i = T + 1`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labels carried alongside the numeric arrays.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub unit_ids: Vec<String>,
    pub period_labels: Vec<String>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
}

/// A balanced panel with staggered binary treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    outcome: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    z: DMatrix<f64>,
    group: Vec<usize>,
    meta: PanelMeta,
}

impl PanelDataset {
    /// Build a panel from arrays. `x` holds one `n × T` matrix per covariate.
    pub fn new(
        outcome: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        z: DMatrix<f64>,
        group: Vec<usize>,
    ) -> Result<Self> {
        let (n, t) = outcome.shape();
        let meta = PanelMeta {
            unit_ids: (1..=n).map(|i| i.to_string()).collect(),
            period_labels: (1..=t).map(|s| s.to_string()).collect(),
            x_names: (1..=x.len()).map(|j| format!("x{j}")).collect(),
            z_names: (1..=z.ncols()).map(|j| format!("z{j}")).collect(),
        };
        Self::with_meta(outcome, x, z, group, meta)
    }

    pub fn with_meta(
        outcome: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        z: DMatrix<f64>,
        group: Vec<usize>,
        meta: PanelMeta,
    ) -> Result<Self> {
        let (n, t) = outcome.shape();
        if n == 0 || t < 2 {
            return Err(Error::ShapeMismatch(format!(
                "need at least one unit and two periods, got {n} x {t}"
            )));
        }
        if group.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "group has length {}, expected {n}",
                group.len()
            )));
        }
        if z.nrows() != n {
            return Err(Error::ShapeMismatch(format!(
                "z has {} rows, expected {n}",
                z.nrows()
            )));
        }
        for (j, xj) in x.iter().enumerate() {
            if xj.shape() != (n, t) {
                return Err(Error::ShapeMismatch(format!(
                    "covariate {j} has shape {:?}",
                    xj.shape()
                )));
            }
        }
        if let Some(i) = group.iter().position(|&g| g <= 1) {
            let unit = meta
                .unit_ids
                .get(i)
                .cloned()
                .unwrap_or_else(|| i.to_string());
            return Err(Error::AlreadyTreatedAtStart { unit });
        }
        if let Some(&g) = group.iter().find(|&&g| g > t + 1) {
            return Err(Error::ShapeMismatch(format!(
                "group {g} beyond never-treated sentinel {}",
                t + 1
            )));
        }
        if meta.unit_ids.len() != n
            || meta.period_labels.len() != t
            || meta.x_names.len() != x.len()
            || meta.z_names.len() != z.ncols()
        {
            return Err(Error::ShapeMismatch(
                "metadata does not match array shapes".into(),
            ));
        }
        Ok(Self {
            outcome,
            x,
            z,
            group,
            meta,
        })
    }

    pub fn n_units(&self) -> usize {
        self.outcome.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcome.ncols()
    }

    pub fn n_x(&self) -> usize {
        self.x.len()
    }

    pub fn n_z(&self) -> usize {
        self.z.ncols()
    }

    /// `n × T` outcome matrix; column `t - 1` is period `t`.
    pub fn outcome(&self) -> &DMatrix<f64> {
        &self.outcome
    }

    /// Outcome of unit `i` in period `t` (1-based).
    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.outcome[(i, t - 1)]
    }

    /// Covariate `j` as an `n × T` matrix.
    pub fn x(&self, j: usize) -> &DMatrix<f64> {
        &self.x[j]
    }

    pub fn xs(&self) -> &[DMatrix<f64>] {
        &self.x
    }

    /// Covariate `j` of unit `i` in period `t` (1-based).
    pub fn x_at(&self, i: usize, t: usize, j: usize) -> f64 {
        self.x[j][(i, t - 1)]
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn meta(&self) -> &PanelMeta {
        &self.meta
    }

    pub fn group(&self, i: usize) -> usize {
        self.group[i]
    }

    pub fn groups(&self) -> &[usize] {
        &self.group
    }

    /// Sentinel group of never-treated units, `T + 1`.
    pub fn never(&self) -> usize {
        self.n_periods() + 1
    }

    pub fn is_never(&self, i: usize) -> bool {
        self.group[i] == self.never()
    }

    /// `D_it = 1{t >= G_i}`.
    pub fn treated(&self, i: usize, t: usize) -> bool {
        t >= self.group[i]
    }

    /// `n × T` matrix of treatment indicators.
    pub fn treatment(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_units(), self.n_periods(), |i, c| {
            if self.treated(i, c + 1) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Distinct groups present, including the never-treated sentinel.
    pub fn group_support(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.group.clone();
        g.sort_unstable();
        g.dedup();
        g
    }

    /// Distinct treated groups (the sentinel excluded).
    pub fn treated_groups(&self) -> Vec<usize> {
        let never = self.never();
        self.group_support()
            .into_iter()
            .filter(|&g| g != never)
            .collect()
    }

    pub fn group_size(&self, g: usize) -> usize {
        self.group.iter().filter(|&&h| h == g).count()
    }

    pub fn n_ever_treated(&self) -> usize {
        let never = self.never();
        self.group.iter().filter(|&&g| g != never).count()
    }

    /// `p_g = P(G = g)` over the full support.
    pub fn group_shares(&self) -> BTreeMap<usize, f64> {
        let n = self.n_units() as f64;
        let mut out = BTreeMap::new();
        for &g in &self.group {
            *out.entry(g).or_insert(0.0) += 1.0 / n;
        }
        out
    }

    /// `p̄_g = P(G = g | G in treated groups)`.
    pub fn conditional_group_shares(&self) -> BTreeMap<usize, f64> {
        let never = self.never();
        let ne = self.n_ever_treated() as f64;
        let mut out = BTreeMap::new();
        for &g in self.group.iter().filter(|&&g| g != never) {
            *out.entry(g).or_insert(0.0) += 1.0 / ne;
        }
        out
    }

    /// Same panel with the outcome replaced.
    pub fn with_outcome(&self, outcome: DMatrix<f64>) -> Result<Self> {
        if outcome.shape() != self.outcome.shape() {
            return Err(Error::ShapeMismatch(
                "replacement outcome has the wrong shape".into(),
            ));
        }
        Ok(Self {
            outcome,
            ..self.clone()
        })
    }

    /// Same panel keeping only the listed covariates.
    pub fn select_covariates(&self, x_keep: &[usize], z_keep: &[usize]) -> Result<Self> {
        if let Some(&j) = x_keep.iter().find(|&&j| j >= self.n_x()) {
            return Err(Error::ShapeMismatch(format!("no covariate {j}")));
        }
        if let Some(&j) = z_keep.iter().find(|&&j| j >= self.n_z()) {
            return Err(Error::ShapeMismatch(format!(
                "no time-invariant covariate {j}"
            )));
        }
        let x = x_keep.iter().map(|&j| self.x[j].clone()).collect();
        let z = DMatrix::from_fn(self.n_units(), z_keep.len(), |i, c| self.z[(i, z_keep[c])]);
        let meta = PanelMeta {
            x_names: x_keep
                .iter()
                .map(|&j| self.meta.x_names[j].clone())
                .collect(),
            z_names: z_keep
                .iter()
                .map(|&j| self.meta.z_names[j].clone())
                .collect(),
            ..self.meta.clone()
        };
        Self::with_meta(self.outcome.clone(), x, z, self.group.clone(), meta)
    }
}

/// Which variable to double-demean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    Outcome,
    Treatment,
    Covariate(usize),
}

/// A double-demeaned `n × T` array with the means that were removed.
#[derive(Debug, Clone, PartialEq)]
pub struct Demeaned {
    pub values: DMatrix<f64>,
    pub unit_means: DVector<f64>,
    pub period_means: DVector<f64>,
    pub grand_mean: f64,
}

/// `v_it − unit mean − period mean + grand mean`.
pub fn double_demean_matrix(v: &DMatrix<f64>) -> Demeaned {
    let (n, t) = v.shape();
    let unit_means = DVector::from_fn(n, |i, _| v.row(i).sum() / t as f64);
    let period_means = DVector::from_fn(t, |c, _| v.column(c).sum() / n as f64);
    let grand_mean = period_means.sum() / t as f64;
    let values = DMatrix::from_fn(n, t, |i, c| {
        v[(i, c)] - unit_means[i] - period_means[c] + grand_mean
    });
    Demeaned {
        values,
        unit_means,
        period_means,
        grand_mean,
    }
}

pub fn double_demean(data: &PanelDataset, variable: Variable) -> Result<Demeaned> {
    match variable {
        Variable::Outcome => Ok(double_demean_matrix(data.outcome())),
        Variable::Treatment => Ok(double_demean_matrix(&data.treatment())),
        Variable::Covariate(j) if j < data.n_x() => Ok(double_demean_matrix(data.x(j))),
        Variable::Covariate(j) => Err(Error::ShapeMismatch(format!("no covariate {j}"))),
    }
}

/// Double-demeaned outcome, treatment and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct DemeanedPanel {
    pub y: Demeaned,
    pub d: Demeaned,
    pub x: Vec<Demeaned>,
}

impl DemeanedPanel {
    pub fn new(data: &PanelDataset) -> Self {
        Self {
            y: double_demean_matrix(data.outcome()),
            d: double_demean_matrix(&data.treatment()),
            x: data.xs().iter().map(double_demean_matrix).collect(),
        }
    }

    /// Stack the `n·T` observations (unit-major) into a `n·T × k` design.
    pub fn stacked_x(&self) -> DMatrix<f64> {
        let k = self.x.len();
        let (n, t) = self.d.values.shape();
        DMatrix::from_fn(n * t, k, |r, j| self.x[j].values[(r / t, r % t)])
    }
}

/// Stack an `n × T` array unit-major into a vector of length `n·T`.
pub fn stack(m: &DMatrix<f64>) -> DVector<f64> {
    let (n, t) = m.shape();
    DVector::from_fn(n * t, |r, _| m[(r / t, r % t)])
}

/// First-differenced view of a two-period panel.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPeriodView {
    pub dy: DVector<f64>,
    /// Intercept column followed by `ΔX`.
    pub dx: DMatrix<f64>,
    pub x_pre: DMatrix<f64>,
    pub x_post: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub d: Vec<bool>,
}

impl TwoPeriodView {
    pub fn n(&self) -> usize {
        self.dy.len()
    }

    pub fn n_treated(&self) -> usize {
        self.d.iter().filter(|&&d| d).count()
    }

    pub fn d_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.d.len(),
            self.d.iter().map(|&d| if d { 1.0 } else { 0.0 }),
        )
    }
}

pub fn two_period_view(data: &PanelDataset) -> Result<TwoPeriodView> {
    if data.n_periods() != 2 {
        return Err(Error::NotTwoPeriod(format!(
            "panel has {} periods",
            data.n_periods()
        )));
    }
    let treated = data.treated_groups();
    if treated != [2] {
        return Err(Error::NotTwoPeriod("panel has no treated units".into()));
    }
    let n = data.n_units();
    let k = data.n_x();
    let dy = DVector::from_fn(n, |i, _| data.y(i, 2) - data.y(i, 1));
    let dx = DMatrix::from_fn(n, k + 1, |i, c| {
        if c == 0 {
            1.0
        } else {
            data.x_at(i, 2, c - 1) - data.x_at(i, 1, c - 1)
        }
    });
    let x_pre = DMatrix::from_fn(n, k, |i, j| data.x_at(i, 1, j));
    let x_post = DMatrix::from_fn(n, k, |i, j| data.x_at(i, 2, j));
    let d = (0..n).map(|i| data.group(i) == 2).collect();
    Ok(TwoPeriodView {
        dy,
        dx,
        x_pre,
        x_post,
        z: data.z().clone(),
        d,
    })
}

/// Which untreated units serve as comparisons for a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonGroup {
    /// Units with `D_t = 0` (never treated or not yet treated).
    #[default]
    NotYetTreated,
    NeverTreated,
}

impl ComparisonGroup {
    pub fn includes(self, data: &PanelDataset, i: usize, t: usize) -> bool {
        match self {
            ComparisonGroup::NotYetTreated => !data.treated(i, t),
            ComparisonGroup::NeverTreated => data.is_never(i),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    pub min_group_size: usize,
    pub comparison: ComparisonGroup,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            min_group_size: 5,
            comparison: ComparisonGroup::NotYetTreated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSize {
    pub group: usize,
    pub never_treated: bool,
    pub size: usize,
    pub share: f64,
}

/// Range of fitted scores for one cell, filled in by callers that fit them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub g: usize,
    pub t: usize,
    pub min_score: f64,
    pub max_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_units: usize,
    pub n_periods: usize,
    pub group_sizes: Vec<GroupSize>,
    pub has_never_treated: bool,
    pub small_groups: Vec<usize>,
    pub min_group_size: usize,
    /// Post-treatment cells `(g, t)` with no comparison units.
    pub cells_without_comparison: Vec<(usize, usize)>,
    pub overlap: Vec<OverlapSummary>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.small_groups.is_empty() && self.cells_without_comparison.is_empty()
    }
}

pub fn validate(data: &PanelDataset, opts: &ValidationOptions) -> ValidationReport {
    let never = data.never();
    let shares = data.group_shares();
    let group_sizes: Vec<GroupSize> = shares
        .iter()
        .map(|(&g, &s)| GroupSize {
            group: g,
            never_treated: g == never,
            size: data.group_size(g),
            share: s,
        })
        .collect();
    let small_groups = group_sizes
        .iter()
        .filter(|gs| gs.size < opts.min_group_size)
        .map(|gs| gs.group)
        .collect();
    let mut cells_without_comparison = Vec::new();
    for g in data.treated_groups() {
        for t in g..=data.n_periods() {
            let any = (0..data.n_units()).any(|i| opts.comparison.includes(data, i, t));
            if !any {
                cells_without_comparison.push((g, t));
            }
        }
    }
    ValidationReport {
        n_units: data.n_units(),
        n_periods: data.n_periods(),
        has_never_treated: shares.contains_key(&never),
        group_sizes,
        small_groups,
        min_group_size: opts.min_group_size,
        cells_without_comparison,
        overlap: Vec::new(),
    }
}

/// Maps CSV columns to panel roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub id: String,
    pub time: String,
    pub y: String,
    pub g: String,
    /// Time-varying covariates.
    pub x: Vec<String>,
    /// Time-invariant covariates.
    pub z: Vec<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            id: "id".into(),
            time: "time".into(),
            y: "y".into(),
            g: "g".into(),
            x: Vec::new(),
            z: Vec::new(),
        }
    }
}

const CONSTANT_TOL: f64 = 1e-9;

fn parse_num(column: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::InvalidValue {
        column: column.to_string(),
        value: raw.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::InvalidValue {
            column: column.to_string(),
            value: raw.to_string(),
        });
    }
    Ok(v)
}

/// `None` means never treated.
fn parse_group(column: &str, raw: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("never") {
        return Ok(None);
    }
    let v: f64 = s.parse().map_err(|_| Error::InvalidValue {
        column: column.to_string(),
        value: raw.to_string(),
    })?;
    if v == 0.0 || v == f64::INFINITY {
        Ok(None)
    } else if v.is_nan() {
        Err(Error::InvalidValue {
            column: column.to_string(),
            value: raw.to_string(),
        })
    } else {
        Ok(Some(v))
    }
}

fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= CONSTANT_TOL * a.abs().max(b.abs()).max(1.0)
}

pub fn load_csv(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<PanelDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, mapping)
}

struct RawRow {
    unit: usize,
    time: f64,
    y: f64,
    g: Option<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
}

/// Parse a long-format panel from any reader.
pub fn read_csv<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let id_c = col(&mapping.id)?;
    let time_c = col(&mapping.time)?;
    let y_c = col(&mapping.y)?;
    let g_c = col(&mapping.g)?;
    let x_c: Vec<usize> = mapping.x.iter().map(|s| col(s)).collect::<Result<_>>()?;
    let z_c: Vec<usize> = mapping.z.iter().map(|s| col(s)).collect::<Result<_>>()?;

    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut unit_ids: Vec<String> = Vec::new();
    let mut time_labels: BTreeMap<u64, (f64, String)> = BTreeMap::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let id = field(id_c).to_string();
        let unit = *unit_index.entry(id.clone()).or_insert_with(|| {
            unit_ids.push(id.clone());
            unit_ids.len() - 1
        });
        let time_raw = field(time_c);
        let time = parse_num(&mapping.time, time_raw)?;
        time_labels
            .entry(order_key(time))
            .or_insert_with(|| (time, time_raw.to_string()));
        rows.push(RawRow {
            unit,
            time,
            y: parse_num(&mapping.y, field(y_c))?,
            g: parse_group(&mapping.g, field(g_c))?,
            x: x_c
                .iter()
                .zip(&mapping.x)
                .map(|(&c, n)| parse_num(n, field(c)))
                .collect::<Result<_>>()?,
            z: z_c
                .iter()
                .zip(&mapping.z)
                .map(|(&c, n)| parse_num(n, field(c)))
                .collect::<Result<_>>()?,
        });
    }
    let n = unit_ids.len();
    let times: Vec<f64> = time_labels.values().map(|(t, _)| *t).collect();
    let period_labels: Vec<String> = time_labels.values().map(|(_, s)| s.clone()).collect();
    let t_count = times.len();
    if n == 0 || t_count < 2 {
        return Err(Error::ShapeMismatch(format!(
            "need at least one unit and two periods, got {n} x {t_count}"
        )));
    }
    let period_of: HashMap<u64, usize> = time_labels
        .keys()
        .enumerate()
        .map(|(p, &k)| (k, p))
        .collect();

    let k = mapping.x.len();
    let l = mapping.z.len();
    let mut filled = vec![false; n * t_count];
    let mut outcome = DMatrix::zeros(n, t_count);
    let mut x = vec![DMatrix::zeros(n, t_count); k];
    let mut z = DMatrix::zeros(n, l);
    let mut g_raw: Vec<Option<Option<f64>>> = vec![None; n];
    for r in &rows {
        let p = period_of[&order_key(r.time)];
        let cell = r.unit * t_count + p;
        if filled[cell] {
            return Err(Error::DuplicateCell {
                unit: unit_ids[r.unit].clone(),
                period: period_labels[p].clone(),
            });
        }
        filled[cell] = true;
        outcome[(r.unit, p)] = r.y;
        for j in 0..k {
            x[j][(r.unit, p)] = r.x[j];
        }
        match g_raw[r.unit] {
            None => {
                g_raw[r.unit] = Some(r.g);
                for j in 0..l {
                    z[(r.unit, j)] = r.z[j];
                }
            }
            Some(prev) => {
                let same = match (prev, r.g) {
                    (None, None) => true,
                    (Some(a), Some(b)) => nearly_equal(a, b),
                    _ => false,
                };
                if !same {
                    return Err(Error::NonConstantTimeInvariant {
                        column: mapping.g.clone(),
                        unit: unit_ids[r.unit].clone(),
                    });
                }
                for j in 0..l {
                    if !nearly_equal(z[(r.unit, j)], r.z[j]) {
                        return Err(Error::NonConstantTimeInvariant {
                            column: mapping.z[j].clone(),
                            unit: unit_ids[r.unit].clone(),
                        });
                    }
                }
            }
        }
    }
    if let Some(cell) = filled.iter().position(|&f| !f) {
        return Err(Error::MissingCell {
            unit: unit_ids[cell / t_count].clone(),
            period: period_labels[cell % t_count].clone(),
        });
    }
    let mut group = Vec::with_capacity(n);
    for (i, g) in g_raw.iter().enumerate() {
        let g = match g.flatten() {
            None => t_count + 1,
            Some(gv) => match times
                .iter()
                .position(|&t| t >= gv - CONSTANT_TOL * gv.abs().max(1.0))
            {
                None => t_count + 1,
                Some(0) => {
                    return Err(Error::AlreadyTreatedAtStart {
                        unit: unit_ids[i].clone(),
                    })
                }
                Some(p) => p + 1,
            },
        };
        group.push(g);
    }
    let meta = PanelMeta {
        unit_ids,
        period_labels,
        x_names: mapping.x.clone(),
        z_names: mapping.z.clone(),
    };
    PanelDataset::with_meta(outcome, x, z, group, meta)
}

/// Total order on finite floats usable as a map key.
fn order_key(v: f64) -> u64 {
    let bits = (v + 0.0).to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// Column mapping that reads back what [`write_csv`] produced.
pub fn mapping_for(data: &PanelDataset) -> ColumnMapping {
    ColumnMapping {
        x: data.meta.x_names.clone(),
        z: data.meta.z_names.clone(),
        ..ColumnMapping::default()
    }
}

/// Write the panel in long format with columns `id,time,y,g,x...,z...`.
///
/// Floats use the shortest round-trip representation, so reading the file
/// back reproduces the arrays bit for bit.
pub fn write_csv<W: Write>(data: &PanelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "time".into(), "y".into(), "g".into()];
    header.extend(data.meta.x_names.iter().cloned());
    header.extend(data.meta.z_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.n_units() {
        let g = data.group(i);
        let g_label = if g == data.never() {
            "0".to_string()
        } else {
            data.meta.period_labels[g - 1].clone()
        };
        for t in 1..=data.n_periods() {
            let mut rec = vec![
                data.meta.unit_ids[i].clone(),
                data.meta.period_labels[t - 1].clone(),
                data.y(i, t).to_string(),
                g_label.clone(),
            ];
            rec.extend((0..data.n_x()).map(|j| data.x_at(i, t, j).to_string()));
            rec.extend((0..data.n_z()).map(|j| data.z[(i, j)].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(t: usize, groups: Vec<usize>) -> PanelDataset {
        let n = groups.len();
        let y = DMatrix::from_fn(n, t, |i, c| (i * 3 + c * c) as f64 * 0.5);
        let x = vec![DMatrix::from_fn(n, t, |i, c| {
            ((i + 1) * (c + 2)) as f64 % 7.0
        })];
        PanelDataset::new(y, x, DMatrix::zeros(n, 0), groups).unwrap()
    }

    #[test]
    fn separable_outcome_demeans_to_zero() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let dd = double_demean_matrix(&y);
        assert!(dd.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn hand_computed_demeaning() {
        // unit means 1.5, 4; period means 2, 3.5; grand mean 2.75
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 5.0]);
        let dd = double_demean_matrix(&y);
        let want = [0.25, -0.25, -0.25, 0.25];
        for (v, w) in dd.values.transpose().iter().zip(want) {
            assert!((v - w).abs() < 1e-15, "{v} vs {w}");
        }
        assert_eq!(dd.grand_mean, 2.75);
    }

    #[test]
    fn two_period_view_differences() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 4.0, 2.0, 2.5]);
        let x = vec![DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 1.0])];
        let data = PanelDataset::new(y, x, DMatrix::zeros(2, 0), vec![2, 3]).unwrap();
        let v = two_period_view(&data).unwrap();
        assert_eq!(
            v.dx.row(0).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            v.dx.row(1).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 0.0]
        );
        assert_eq!(v.dy.as_slice(), &[3.0, 0.5]);
        assert_eq!(v.d, vec![true, false]);
    }

    #[test]
    fn three_periods_is_not_two_period() {
        let data = tiny(3, vec![2, 3, 4]);
        assert!(matches!(
            two_period_view(&data),
            Err(Error::NotTwoPeriod(_))
        ));
    }

    #[test]
    fn shares_sum_to_one() {
        let data = tiny(4, vec![2, 2, 3, 5, 5, 4, 3]);
        let p: f64 = data.group_shares().values().sum();
        let pbar: f64 = data.conditional_group_shares().values().sum();
        assert!((p - 1.0).abs() < 1e-15 && (pbar - 1.0).abs() < 1e-15);
    }

    #[test]
    fn validation_flags() {
        let all_treated = tiny(2, vec![2, 2, 2]);
        let r = validate(&all_treated, &ValidationOptions::default());
        assert_eq!(r.cells_without_comparison, vec![(2, 2)]);

        let with_never = tiny(3, vec![2, 3, 4, 4, 4, 4, 4]);
        let r = validate(
            &with_never,
            &ValidationOptions {
                min_group_size: 5,
                ..Default::default()
            },
        );
        assert!(r.cells_without_comparison.is_empty());
        assert!(r.has_never_treated);
        assert_eq!(r.small_groups, vec![2, 3]);
    }

    #[test]
    fn rejects_treated_at_start() {
        let y = DMatrix::zeros(2, 2);
        let e = PanelDataset::new(y, vec![], DMatrix::zeros(2, 0), vec![1, 3]).unwrap_err();
        assert!(matches!(e, Error::AlreadyTreatedAtStart { .. }));
    }

    const GOOD: &str = "id,time,y,g,x,z\n\
        a,2001,1.0,2002,0.5,1\n a,2002,2.0,2002,0.7,1\n\
        b,2001,1.5,0,0.1,2\n b,2002,1.7,0,0.2,2\n\
        c,2001,0.5,,0.3,3\n c,2002,0.9,,0.4,3\n\
        d,2002,3.0,2002,1.3,4\n d,2001,2.0,2002,1.1,4\n";

    fn mapping() -> ColumnMapping {
        ColumnMapping {
            x: vec!["x".into()],
            z: vec!["z".into()],
            ..Default::default()
        }
    }

    #[test]
    fn loads_long_format() {
        let data = read_csv(GOOD.as_bytes(), &mapping()).unwrap();
        assert_eq!((data.n_units(), data.n_periods()), (4, 2));
        assert_eq!(data.groups(), &[2, 3, 3, 2]);
        assert_eq!(data.meta().period_labels, vec!["2001", "2002"]);
        assert_eq!(data.y(3, 1), 2.0);
        assert_eq!(data.z()[(3, 0)], 4.0);
    }

    #[test]
    fn missing_cell_is_an_error() {
        let text = "id,time,y,g\na,1,1,2\na,2,1,2\nb,1,1,0\nb,2,1,0\nc,1,2,0\n";
        let e = read_csv(text.as_bytes(), &ColumnMapping::default()).unwrap_err();
        assert!(
            matches!(e, Error::MissingCell { ref unit, ref period } if unit == "c" && period == "2")
        );
    }

    #[test]
    fn varying_z_is_an_error() {
        let text = "id,time,y,g,z\na,1,1,2,1\na,2,1,2,2\nb,1,1,0,1\nb,2,1,0,1\n";
        let m = ColumnMapping {
            z: vec!["z".into()],
            ..Default::default()
        };
        let e = read_csv(text.as_bytes(), &m).unwrap_err();
        assert!(matches!(e, Error::NonConstantTimeInvariant { .. }));
    }

    #[test]
    fn other_load_errors() {
        let m = ColumnMapping {
            x: vec!["nope".into()],
            ..Default::default()
        };
        assert!(matches!(
            read_csv(GOOD.as_bytes(), &m),
            Err(Error::UnknownColumn(_))
        ));
        let text = "id,time,y,g\na,1,1,1\na,2,1,1\nb,1,1,0\nb,2,1,0\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &ColumnMapping::default()),
            Err(Error::AlreadyTreatedAtStart { .. })
        ));
        let text = "id,time,y,g\na,1,1,2\na,1,1,2\nb,1,1,0\nb,2,1,0\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &ColumnMapping::default()),
            Err(Error::DuplicateCell { .. })
        ));
    }

    #[test]
    fn group_beyond_last_period_is_never_treated() {
        let text = "id,time,y,g\na,1,1,2\na,2,1,2\nb,1,1,9\nb,2,1,9\n";
        let data = read_csv(text.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(data.groups(), &[2, 3]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let data = read_csv(GOOD.as_bytes(), &mapping()).unwrap();
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &mapping_for(&data)).unwrap();
        assert_eq!(back, data);
    }

    fn arb_matrix() -> impl Strategy<Value = DMatrix<f64>> {
        (1usize..8, 2usize..6).prop_flat_map(|(n, t)| {
            proptest::collection::vec(-100.0f64..100.0, n * t)
                .prop_map(move |v| DMatrix::from_row_slice(n, t, &v))
        })
    }

    proptest! {
        #[test]
        fn demeaned_margins_vanish(m in arb_matrix()) {
            let dd = double_demean_matrix(&m);
            let scale = m.amax().max(1.0);
            for i in 0..m.nrows() {
                prop_assert!(dd.values.row(i).sum().abs() <= 1e-12 * scale);
            }
            for c in 0..m.ncols() {
                prop_assert!(dd.values.column(c).sum().abs() <= 1e-12 * scale * m.nrows() as f64);
            }
        }

        #[test]
        fn demeaning_is_idempotent(m in arb_matrix()) {
            let once = double_demean_matrix(&m).values;
            let twice = double_demean_matrix(&once).values;
            let scale = m.amax().max(1.0);
            prop_assert!((once - twice).amax() <= 1e-12 * scale);
        }

        #[test]
        fn demeaned_orthogonal_to_unit_and_period_constants(
            m in arb_matrix(),
            seed in proptest::collection::vec(-5.0f64..5.0, 20),
        ) {
            let (n, t) = m.shape();
            let dd = double_demean_matrix(&m).values;
            let scale = m.amax().max(1.0);
            // period-constant c_t
            let s: f64 = (0..n).map(|i| (0..t).map(|c| dd[(i, c)] * seed[c]).sum::<f64>() / t as f64).sum::<f64>() / n as f64;
            prop_assert!(s.abs() <= 1e-10 * scale);
            // unit-constant b_i
            for i in 0..n {
                let b = seed[(i + 7) % 20];
                let s: f64 = (0..t).map(|c| dd[(i, c)] * b).sum::<f64>() / t as f64;
                prop_assert!(s.abs() <= 1e-10 * scale);
            }
        }
    }
}
