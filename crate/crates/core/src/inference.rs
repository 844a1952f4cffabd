//! Multiplier bootstrap over per-unit influence values.
//!
//! Replicate `b` draws its multipliers from its own ChaCha stream, so the
//! result depends only on `(seed, draws, multiplier)` and not on how the
//! replicates are scheduled.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::gtatt::{AggregateResult, GroupTimeResult};

pub const MIN_DRAWS: usize = 200;

/// Per-unit influence values, one column per estimand.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    labels: Vec<String>,
    estimates: Vec<f64>,
    columns: DMatrix<f64>,
}

impl InfluenceMatrix {
    pub fn new(labels: Vec<String>, estimates: Vec<f64>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if labels.len() != estimates.len() || labels.len() != columns.len() {
            return Err(Error::InconsistentInfluence);
        }
        let n = columns.first().map_or(0, Vec::len);
        if n == 0 || columns.iter().any(|c| c.len() != n) {
            return Err(Error::InconsistentInfluence);
        }
        let k = columns.len();
        let m = DMatrix::from_fn(n, k, |i, j| columns[j][i]);
        Ok(Self {
            labels,
            estimates,
            columns: m,
        })
    }

    /// Group-time columns first, then aggregates, in the order given.
    pub fn from_results(cells: &[GroupTimeResult], aggregates: &[AggregateResult]) -> Result<Self> {
        let mut labels = Vec::new();
        let mut est = Vec::new();
        let mut cols = Vec::new();
        for r in cells {
            labels.push(format!("att_{}_{}", r.g, r.t));
            est.push(r.estimate);
            cols.push(r.influence.clone());
        }
        for a in aggregates {
            labels.push(a.kind.label());
            est.push(a.estimate);
            cols.push(a.influence.clone());
        }
        Self::new(labels, est, cols)
    }

    pub fn n_units(&self) -> usize {
        self.columns.nrows()
    }

    pub fn n_estimands(&self) -> usize {
        self.columns.ncols()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.n_units() as f64;
        self.columns.column_iter().map(|c| c.sum() / n).collect()
    }

    /// `sqrt(mean(ψ²) / n)` per column.
    pub fn analytic_se(&self) -> Vec<f64> {
        let n = self.n_units() as f64;
        self.columns
            .column_iter()
            .map(|c| (c.norm_squared() / n / n).sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiplier {
    #[default]
    Rademacher,
    Mammen,
}

impl std::str::FromStr for Multiplier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rademacher" => Ok(Self::Rademacher),
            "mammen" => Ok(Self::Mammen),
            _ => Err(Error::InvalidConfig(format!("unknown multiplier {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeKind {
    #[default]
    StdDev,
    /// Interquartile range over 1.349.
    NormalizedIqr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiKind {
    #[default]
    Normal,
    /// `estimate ± q`, `q` the empirical quantile of `|T_b|`.
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub draws: usize,
    pub multiplier: Multiplier,
    pub seed: u64,
    pub ci_level: f64,
    pub se_kind: SeKind,
    pub ci_kind: CiKind,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            draws: 999,
            multiplier: Multiplier::Rademacher,
            seed: 0,
            ci_level: 0.95,
            se_kind: SeKind::StdDev,
            ci_kind: CiKind::Normal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEstimate {
    pub label: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl BootstrapEstimate {
    pub fn covers(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimates: Vec<BootstrapEstimate>,
    pub draws: usize,
    pub multiplier: Multiplier,
    pub seed: u64,
    pub ci_level: f64,
    pub se_kind: SeKind,
    pub ci_kind: CiKind,
}

impl BootstrapResult {
    pub fn get(&self, label: &str) -> Option<&BootstrapEstimate> {
        self.estimates.iter().find(|e| e.label == label)
    }
}

fn replicate_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

fn multipliers(kind: Multiplier, n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    match kind {
        Multiplier::Rademacher => {
            let mut v = DVector::zeros(n);
            let mut bits = 0u64;
            for i in 0..n {
                if i % 64 == 0 {
                    bits = rng.next_u64();
                }
                v[i] = if (bits >> (i % 64)) & 1 == 1 {
                    1.0
                } else {
                    -1.0
                };
            }
            v
        }
        Multiplier::Mammen => {
            let s5 = 5f64.sqrt();
            let lo = -(s5 - 1.0) / 2.0;
            let hi = (s5 + 1.0) / 2.0;
            let p_lo = (s5 + 1.0) / (2.0 * s5);
            DVector::from_fn(n, |_, _| if rng.random::<f64>() < p_lo { lo } else { hi })
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn multiplier_bootstrap(
    infl: &InfluenceMatrix,
    cfg: &BootstrapConfig,
    exec: Execution,
) -> Result<BootstrapResult> {
    if cfg.draws < MIN_DRAWS {
        return Err(Error::TooFewDraws {
            got: cfg.draws,
            min: MIN_DRAWS,
        });
    }
    if !(cfg.ci_level > 0.0 && cfg.ci_level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "ci level {} outside (0, 1)",
            cfg.ci_level
        )));
    }
    let n = infl.n_units();
    let k = infl.n_estimands();
    let psi_t = infl.columns.transpose();
    let reps: Vec<DVector<f64>> = map_indexed(exec, cfg.draws, |b| {
        let mut rng = replicate_rng(cfg.seed, b);
        let v = multipliers(cfg.multiplier, n, &mut rng);
        &psi_t * v / n as f64
    });
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + cfg.ci_level / 2.0);
    let bn = cfg.draws as f64;
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let draws: Vec<f64> = reps.iter().map(|r| r[j]).collect();
        let mean = draws.iter().sum::<f64>() / bn;
        let se = match cfg.se_kind {
            SeKind::StdDev => {
                (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (bn - 1.0)).sqrt()
            }
            SeKind::NormalizedIqr => {
                let mut s = draws.clone();
                s.sort_by(f64::total_cmp);
                (quantile(&s, 0.75) - quantile(&s, 0.25)) / 1.349
            }
        };
        let half = match cfg.ci_kind {
            CiKind::Normal => z * se,
            CiKind::Quantile => {
                let mut a: Vec<f64> = draws.iter().map(|d| d.abs()).collect();
                a.sort_by(f64::total_cmp);
                quantile(&a, cfg.ci_level)
            }
        };
        let est = infl.estimates[j];
        out.push(BootstrapEstimate {
            label: infl.labels[j].clone(),
            estimate: est,
            se,
            ci_lower: est - half,
            ci_upper: est + half,
        });
    }
    Ok(BootstrapResult {
        estimates: out,
        draws: cfg.draws,
        multiplier: cfg.multiplier,
        seed: cfg.seed,
        ci_level: cfg.ci_level,
        se_kind: cfg.se_kind,
        ci_kind: cfg.ci_kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let m = v.iter().sum::<f64>() / n as f64;
        v.into_iter().map(|x| x - m).collect()
    }

    #[test]
    fn zero_column_gives_degenerate_interval() {
        let infl = InfluenceMatrix::new(vec!["a".into()], vec![1.5], vec![vec![0.0; 50]]).unwrap();
        let r = multiplier_bootstrap(&infl, &BootstrapConfig::default(), Execution::Sequential)
            .unwrap();
        let e = &r.estimates[0];
        assert_eq!(e.se, 0.0);
        assert_eq!((e.ci_lower, e.ci_upper), (1.5, 1.5));
    }

    #[test]
    fn gaussian_se_matches_analytic() {
        let (n, sigma) = (2000, 3.0);
        let psi = gaussian(n, sigma, 11);
        let infl = InfluenceMatrix::new(vec!["a".into()], vec![0.0], vec![psi]).unwrap();
        let target = sigma / (n as f64).sqrt();
        for multiplier in [Multiplier::Rademacher, Multiplier::Mammen] {
            let cfg = BootstrapConfig {
                draws: 5000,
                multiplier,
                seed: 3,
                ..Default::default()
            };
            let se = multiplier_bootstrap(&infl, &cfg, Execution::Parallel)
                .unwrap()
                .estimates[0]
                .se;
            assert!(
                (se / target - 1.0).abs() < 0.05,
                "{multiplier:?} {se} {target}"
            );
        }
    }

    #[test]
    fn same_seed_is_bit_identical_across_modes() {
        let infl = InfluenceMatrix::new(
            vec!["a".into(), "b".into()],
            vec![0.1, -0.2],
            vec![gaussian(300, 1.0, 1), gaussian(300, 2.0, 2)],
        )
        .unwrap();
        let cfg = BootstrapConfig {
            draws: 499,
            seed: 7,
            ..Default::default()
        };
        let a = multiplier_bootstrap(&infl, &cfg, Execution::Sequential).unwrap();
        let b = multiplier_bootstrap(&infl, &cfg, Execution::Parallel).unwrap();
        let c = multiplier_bootstrap(&infl, &cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
        let d = multiplier_bootstrap(
            &infl,
            &BootstrapConfig { seed: 8, ..cfg },
            Execution::Sequential,
        )
        .unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn too_few_draws() {
        let infl =
            InfluenceMatrix::new(vec!["a".into()], vec![0.0], vec![vec![1.0, -1.0]]).unwrap();
        let cfg = BootstrapConfig {
            draws: 100,
            ..Default::default()
        };
        assert!(matches!(
            multiplier_bootstrap(&infl, &cfg, Execution::Sequential),
            Err(Error::TooFewDraws { got: 100, min: 200 })
        ));
    }

    #[test]
    fn ragged_columns_are_rejected() {
        let r = InfluenceMatrix::new(
            vec!["a".into(), "b".into()],
            vec![0.0, 0.0],
            vec![vec![1.0], vec![1.0, 2.0]],
        );
        assert!(matches!(r, Err(Error::InconsistentInfluence)));
    }

    #[test]
    fn multiplier_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [Multiplier::Rademacher, Multiplier::Mammen] {
            let v = multipliers(kind, 200_000, &mut rng);
            let m = v.mean();
            let var = v.map(|x| (x - m).powi(2)).mean();
            assert!(
                m.abs() < 0.01 && (var - 1.0).abs() < 0.01,
                "{kind:?} {m} {var}"
            );
        }
    }

    #[test]
    fn iqr_and_quantile_options() {
        let psi = gaussian(1000, 1.0, 9);
        let infl = InfluenceMatrix::new(vec!["a".into()], vec![0.3], vec![psi]).unwrap();
        let base = BootstrapConfig {
            draws: 2000,
            seed: 1,
            ..Default::default()
        };
        let sd = multiplier_bootstrap(&infl, &base, Execution::Sequential)
            .unwrap()
            .estimates[0]
            .clone();
        let cfg = BootstrapConfig {
            se_kind: SeKind::NormalizedIqr,
            ci_kind: CiKind::Quantile,
            ..base
        };
        let iq = multiplier_bootstrap(&infl, &cfg, Execution::Sequential)
            .unwrap()
            .estimates[0]
            .clone();
        assert!((iq.se / sd.se - 1.0).abs() < 0.1);
        assert!(((iq.ci_upper - iq.ci_lower) / (sd.ci_upper - sd.ci_lower) - 1.0).abs() < 0.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn interval_contains_estimate(
            est in -10.0f64..10.0,
            seed in any::<u64>(),
            psi in prop::collection::vec(-5.0f64..5.0, 2..40),
            quant in any::<bool>(),
        ) {
            let infl = InfluenceMatrix::new(vec!["a".into()], vec![est], vec![psi]).unwrap();
            let cfg = BootstrapConfig {
                draws: 200,
                seed,
                ci_kind: if quant { CiKind::Quantile } else { CiKind::Normal },
                ..Default::default()
            };
            let e = multiplier_bootstrap(&infl, &cfg, Execution::Sequential).unwrap().estimates[0].clone();
            prop_assert!(e.covers(est));
            prop_assert!(e.se >= 0.0);
        }
    }
}
