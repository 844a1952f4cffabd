//! Least-squares projections.
//!
//! Solved by Householder QR on the selected rows. Rank is checked on the
//! singular values of `R`, which equal those of the design.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest one signal rank deficiency.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionFit {
    pub coefficients: DVector<f64>,
    /// Fitted values for every row, including rows outside the subset.
    pub fitted: DVector<f64>,
    /// `response - fitted` for every row.
    pub residuals: DVector<f64>,
    /// Condition number of the cross-product matrix on the subset.
    pub gram_condition: f64,
    pub dof: usize,
    pub n_used: usize,
}

fn select_rows(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    rows: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let p = design.ncols();
    let a = DMatrix::from_fn(rows.len(), p, |r, c| design[(rows[r], c)]);
    let b = DVector::from_fn(rows.len(), |r, _| response[rows[r]]);
    (a, b)
}

/// Columns that load on the numerically null directions of `a`.
fn offending_columns(a: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let p = a.ncols();
    let svd = a.clone().svd(false, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 {
        (smax / smin).powi(2)
    } else {
        f64::INFINITY
    };
    let mut cols = Vec::new();
    if let Some(vt) = svd.v_t.as_ref() {
        for (r, &s) in sv.iter().enumerate() {
            if s <= RANK_TOL * smax {
                for c in 0..p {
                    if vt[(r, c)].abs() > 1e-6 && !cols.contains(&c) {
                        cols.push(c);
                    }
                }
            }
        }
    }
    cols.sort_unstable();
    if cols.is_empty() {
        cols = (0..p).collect();
    }
    (cols, cond)
}

/// Regress `response` on `design` using the rows where `subset` is true.
pub fn project(
    response: &DVector<f64>,
    design: &DMatrix<f64>,
    subset: Option<&[bool]>,
) -> Result<ProjectionFit> {
    let n = design.nrows();
    if response.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "response has {} rows, design {n}",
            response.len()
        )));
    }
    if let Some(s) = subset {
        if s.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "subset mask has {} rows, design {n}",
                s.len()
            )));
        }
    }
    let rows: Vec<usize> = match subset {
        Some(s) => (0..n).filter(|&i| s[i]).collect(),
        None => (0..n).collect(),
    };
    if rows.is_empty() {
        return Err(Error::EmptySubset);
    }
    let p = design.ncols();
    let m = rows.len();
    if p == 0 {
        return Ok(ProjectionFit {
            coefficients: DVector::zeros(0),
            fitted: DVector::zeros(n),
            residuals: response.clone(),
            gram_condition: 1.0,
            dof: m,
            n_used: m,
        });
    }
    let (a, mut b) = if rows.len() == n {
        (design.clone(), response.clone())
    } else {
        select_rows(design, response, &rows)
    };
    if m < p {
        let (columns, condition) = offending_columns(&a);
        return Err(Error::RankDeficient { columns, condition });
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let sv = r.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smax > 0.0) || smin <= RANK_TOL * smax {
        let (columns, condition) = offending_columns(&a);
        return Err(Error::RankDeficient { columns, condition });
    }
    qr.q_tr_mul(&mut b);
    let qtb = b.rows(0, p).into_owned();
    let coefficients = r.solve_upper_triangular(&qtb).ok_or(Error::RankDeficient {
        columns: (0..p).collect(),
        condition: f64::INFINITY,
    })?;
    let fitted = design * &coefficients;
    let residuals = response - &fitted;
    Ok(ProjectionFit {
        coefficients,
        fitted,
        residuals,
        gram_condition: (smax / smin).powi(2),
        dof: m - p,
        n_used: m,
    })
}

/// Pieces of a Frisch-Waugh-Lovell ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwlRatio {
    /// Mean of residualized target times response.
    pub numerator: f64,
    /// Mean of squared residualized target.
    pub denominator: f64,
    pub ratio: f64,
}

/// Residualize `target` on `partialled` and return
/// `mean(r * response) / mean(r^2)` over the selected rows.
pub fn fwl_partial(
    target: &DVector<f64>,
    partialled: &DMatrix<f64>,
    response: &DVector<f64>,
    subset: Option<&[bool]>,
) -> Result<FwlRatio> {
    let fit = project(target, partialled, subset)?;
    let keep = |i: usize| subset.is_none_or(|s| s[i]);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut scale = 0.0;
    for i in (0..target.len()).filter(|&i| keep(i)) {
        let r = fit.residuals[i];
        num += r * response[i];
        den += r * r;
        scale += target[i] * target[i];
    }
    let m = fit.n_used as f64;
    if den <= 1e-12 * scale {
        return Err(Error::DegenerateDenominator);
    }
    Ok(FwlRatio {
        numerator: num / m,
        denominator: den / m,
        ratio: num / den,
    })
}

/// Prepend an intercept column.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(
        n,
        x.ncols() + 1,
        |i, c| if c == 0 { 1.0 } else { x[(i, c - 1)] },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: solve the normal equations by Gaussian elimination.
    fn normal_equations(y: &DVector<f64>, x: &DMatrix<f64>) -> Vec<f64> {
        let p = x.ncols();
        let mut a = vec![vec![0.0; p + 1]; p];
        for r in 0..x.nrows() {
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += x[(r, i)] * x[(r, j)];
                }
                a[i][p] += x[(r, i)] * y[r];
            }
        }
        for c in 0..p {
            let piv = (c..p)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            a.swap(c, piv);
            for r in 0..p {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=p {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        (0..p).map(|i| a[i][p] / a[i][i]).collect()
    }

    fn random_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, c| {
            if c == 0 {
                1.0
            } else {
                rng.random_range(-2.0..2.0)
            }
        })
    }

    #[test]
    fn exact_representation() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 2.0, 1.0]);
        let y = DVector::from_column_slice(&[1.0, 0.0, 2.0]);
        let f = project(&y, &x, None).unwrap();
        assert!((f.coefficients[0] - 1.0).abs() < 1e-14 && f.coefficients[1].abs() < 1e-14);
        assert!(f.residuals.amax() < 1e-14);
    }

    #[test]
    fn intercept_only_is_the_mean() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let y = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let f = project(&y, &x, None).unwrap();
        assert!((f.coefficients[0] - 2.0).abs() < 1e-14);
        for (r, w) in f.residuals.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((r - w).abs() < 1e-14);
        }
        assert_eq!(f.dof, 2);
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_design(&mut rng, 50, 3);
        let y = DVector::from_fn(50, |i, _| {
            1.0 + 2.0 * x[(i, 1)] - 0.5 * x[(i, 2)] + rng.random_range(-0.3..0.3)
        });
        let f = project(&y, &x, None).unwrap();
        let oracle = normal_equations(&y, &x);
        for (a, b) in f.coefficients.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn subset_fit_predicts_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_design(&mut rng, 40, 2);
        let y = DVector::from_fn(40, |i, _| x[(i, 1)] * 3.0 + rng.random_range(-1.0..1.0));
        let mask: Vec<bool> = (0..40).map(|i| i % 3 != 0).collect();
        let f = project(&y, &x, Some(&mask)).unwrap();
        let sub: Vec<usize> = (0..40).filter(|&i| mask[i]).collect();
        let xs = DMatrix::from_fn(sub.len(), 2, |r, c| x[(sub[r], c)]);
        let ys = DVector::from_fn(sub.len(), |r, _| y[sub[r]]);
        let oracle = normal_equations(&ys, &xs);
        assert!((f.coefficients[1] - oracle[1]).abs() < 1e-10);
        let pred0 = oracle[0] + oracle[1] * x[(0, 1)];
        assert!((f.fitted[0] - pred0).abs() < 1e-10);
        assert_eq!(f.n_used, sub.len());
    }

    #[test]
    fn collinear_design_is_rejected() {
        let x = DMatrix::from_fn(10, 3, |i, c| match c {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64,
        });
        let y = DVector::from_fn(10, |i, _| i as f64);
        match project(&y, &x, None) {
            Err(Error::RankDeficient { columns, .. }) => assert_eq!(columns, vec![1, 2]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn empty_subset_is_rejected() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let y = DVector::zeros(3);
        assert!(matches!(
            project(&y, &x, Some(&[false, false, false])),
            Err(Error::EmptySubset)
        ));
    }

    #[test]
    fn fwl_self_projection_and_degenerate_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200;
        let target = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let other = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let r = fwl_partial(&target, &other, &target, None).unwrap();
        assert!((r.ratio - 1.0).abs() < 0.05);

        let constant = DVector::from_element(n, 3.0);
        let design = with_intercept(&other);
        assert!(matches!(
            fwl_partial(&constant, &design, &target, None),
            Err(Error::DegenerateDenominator)
        ));
    }

    #[test]
    fn fwl_matches_joint_regression_in_two_period_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 300;
        let dx = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let d = DVector::from_fn(n, |i, _| {
            if dx[(i, 0)] + rng.random_range(-1.0..1.0) > 0.0 {
                1.0
            } else {
                0.0
            }
        });
        let dy = DVector::from_fn(n, |i, _| {
            1.5 * d[i] + dx[(i, 0)] - dx[(i, 1)] + rng.random_range(-1.0..1.0)
        });
        let joint = DMatrix::from_fn(n, 4, |i, c| match c {
            0 => 1.0,
            1 => d[i],
            _ => dx[(i, c - 2)],
        });
        let oracle = normal_equations(&dy, &joint);
        let r = fwl_partial(&d, &with_intercept(&dx), &dy, None).unwrap();
        assert!((r.ratio - oracle[1]).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_and_fwl_equivalent(seed in 0u64..10_000, n in 8usize..60, p in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_design(&mut rng, n, p);
            let y = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
            let f = project(&y, &x, None).unwrap();
            let scale = y.norm() * x.norm();
            for c in 0..p {
                prop_assert!(x.column(c).dot(&f.residuals).abs() <= 1e-8 * scale.max(1.0));
            }
            prop_assert!((&f.fitted + &f.residuals - &y).amax() <= 1e-12 * y.amax().max(1.0));
            let j = p - 1;
            let target = x.column(j).into_owned();
            let rest = x.columns(0, j).into_owned();
            let r = fwl_partial(&target, &rest, &y, None).unwrap();
            prop_assert!((r.ratio - f.coefficients[j]).abs() <= 1e-10 * f.coefficients.amax().max(1.0));
        }

        #[test]
        fn deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_design(&mut rng, 30, 3);
            let y = DVector::from_fn(30, |_, _| rng.random_range(-5.0..5.0));
            let a = project(&y, &x, None).unwrap();
            let b = project(&y, &x, None).unwrap();
            prop_assert_eq!(a.coefficients, b.coefficients);
        }
    }
}
