//! Small numerical helpers: moments, least squares, ranks, normal tails.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with n − 1 denominator (0 for fewer than two points).
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (xs.len() - 1) as f64
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let (vx, vy) = (variance(xs), variance(ys));
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    covariance(xs, ys) / (vx * vy).sqrt()
}

/// Sample autocorrelation at the given lag.
pub fn autocorrelation(xs: &[f64], lag: usize) -> f64 {
    if xs.len() <= lag + 1 {
        return 0.0;
    }
    let m = mean(xs);
    let denom: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    if denom <= 0.0 {
        return 0.0;
    }
    let num: f64 = xs[lag..]
        .iter()
        .zip(xs)
        .map(|(a, b)| (a - m) * (b - m))
        .sum();
    num / denom
}

/// Result of a simple regression `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpleFit {
    pub slope: f64,
    pub intercept: f64,
    /// Classical OLS standard error of the slope.
    pub slope_se: f64,
}

pub fn simple_regression(x: &[f64], y: &[f64]) -> Result<SimpleFit> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} points", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::SingularDesign);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let slope_se = (sse / (n - 2) as f64 / sxx).sqrt();
    Ok(SimpleFit {
        slope,
        intercept,
        slope_se,
    })
}

/// Least squares `argmin ||X B − Y||` via SVD; errors on rank deficiency.
pub fn ols(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < x.ncols() {
        return Err(Error::SingularDesign);
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-10 {
        return Err(Error::SingularDesign);
    }
    svd.solve(y, 0.0).map_err(|_| Error::SingularDesign)
}

/// Ridge solution of `(XᵀX + λ·D) B = XᵀY` where D is the identity with
/// zeros on the `unpenalized` columns.
pub fn ridge(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    unpenalized: &[usize],
) -> Result<DMatrix<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let mut gram = x.transpose() * x;
    for k in 0..gram.nrows() {
        if !unpenalized.contains(&k) {
            gram[(k, k)] += lambda;
        }
    }
    let rhs = x.transpose() * y;
    if let Some(chol) = gram.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    let sol = gram.lu().solve(&rhs).ok_or(Error::SingularDesign)?;
    if sol.iter().all(|v| v.is_finite()) {
        Ok(sol)
    } else {
        Err(Error::SingularDesign)
    }
}

/// Adds a leading column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] })
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

pub fn normal_cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

/// Upper-tail critical value z with P(Z > z) = p.
pub fn normal_upper_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(1.0 - p)
}

/// Two-sided p-value of a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return 1.0;
    }
    if z.is_infinite() {
        return 0.0;
    }
    (2.0 * std_normal().sf(z.abs())).min(1.0)
}

/// Ranks starting at 1, ties get the average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    correlation(&ranks(xs), &ranks(ys))
}

/// Mann–Whitney AUROC with ties counted as one half. Returns 0.5 when either
/// class is empty.
pub fn auroc(positive: &[f64], negative: &[f64]) -> f64 {
    if positive.is_empty() || negative.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for p in positive {
        for n in negative {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (positive.len() * negative.len()) as f64
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Column-wise standardization; returns (standardized, means, scales).
/// Constant columns keep scale 1.
pub fn standardize_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let n = x.nrows();
    let means = DVector::from_fn(x.ncols(), |j, _| x.column(j).mean());
    let scales = DVector::from_fn(x.ncols(), |j, _| {
        let s = if n > 1 {
            (x.column(j).variance() * n as f64 / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });
    let z = DMatrix::from_fn(n, x.ncols(), |r, c| (x[(r, c)] - means[c]) / scales[c]);
    (z, means, scales)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn simple_regression_recovers_line() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let fit = simple_regression(&x, &y).unwrap();
        assert!(close(fit.slope, 2.0, 1e-12));
        assert!(close(fit.intercept, 1.0, 1e-10));
        assert!(fit.slope_se < 1e-8);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn auroc_counts_ties_half() {
        assert_eq!(auroc(&[1.0, 0.5], &[0.5]), 0.75);
        assert_eq!(auroc(&[], &[1.0]), 0.5);
    }

    #[test]
    fn ols_detects_collinearity() {
        let x = DMatrix::from_fn(10, 2, |r, _| r as f64);
        let y = DMatrix::from_fn(10, 1, |r, _| r as f64);
        assert!(matches!(ols(&x, &y), Err(Error::SingularDesign)));
        // Ridge still solves it.
        assert!(ridge(&x, &y, 1.0, &[]).is_ok());
    }

    #[test]
    fn normal_tails() {
        assert!(close(normal_upper_quantile(0.025), 1.959964, 1e-5));
        assert!(close(two_sided_p(1.959964), 0.05, 1e-5));
        assert_eq!(two_sided_p(f64::INFINITY), 0.0);
    }
}
