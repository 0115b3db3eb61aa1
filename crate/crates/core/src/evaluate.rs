//! Evaluation metrics and the naive observed-scale FPCA comparator.

use nalgebra::DMatrix;

use crate::error::{FsgcError, Result};
use crate::latent::{self, EigenSystem, Retain};
use crate::rank::ObservationSet;

/// Trapezoidal `∫∫ (C_true − C_hat)²` over the grid square.
pub fn ise(c_true: &DMatrix<f64>, c_hat: &DMatrix<f64>, grid: &[f64]) -> Result<f64> {
    let m = grid.len();
    for c in [c_true, c_hat] {
        if c.nrows() != m || c.ncols() != m {
            return Err(FsgcError::GridMismatch {
                expected: m,
                actual: c.nrows(),
            });
        }
    }
    let w = latent::trapezoid_weights(grid)?;
    let mut total = 0.0;
    for j in 0..m {
        for k in 0..m {
            total += w[j] * w[k] * (c_true[(j, k)] - c_hat[(j, k)]).powi(2);
        }
    }
    Ok(total)
}

/// Treatment of time points whose observed values do not vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroVariance {
    Error,
    /// Correlation 0 with every other time point, 1 on the diagonal.
    Uncorrelated,
}

/// Pearson correlation matrix of complete rows, with the indices of
/// zero-variance columns.
pub fn pearson_correlation(rows: &[Vec<f64>], policy: ZeroVariance) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let n = rows.len();
    if n < 2 {
        return Err(FsgcError::InsufficientData(format!(
            "correlation needs at least 2 subjects, got {n}"
        )));
    }
    let m = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != m) {
        return Err(FsgcError::GridMismatch {
            expected: m,
            actual: r.len(),
        });
    }
    let means: Vec<f64> = (0..m).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, m, |i, j| rows[i][j] - means[j]);
    let cov = centered.tr_mul(&centered);
    let mut zero = Vec::new();
    for j in 0..m {
        if cov[(j, j)] <= 0.0 {
            if policy == ZeroVariance::Error {
                return Err(FsgcError::ZeroVariance { time_index: j });
            }
            zero.push(j);
        }
    }
    let corr = DMatrix::from_fn(m, m, |a, b| {
        if a == b {
            1.0
        } else if cov[(a, a)] <= 0.0 || cov[(b, b)] <= 0.0 {
            0.0
        } else {
            (cov[(a, b)] / (cov[(a, a)].sqrt() * cov[(b, b)].sqrt())).clamp(-1.0, 1.0)
        }
    });
    Ok((corr, zero))
}

/// Naive FPCA on the observed values.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub correlation: DMatrix<f64>,
    pub eigen: EigenSystem,
    pub zero_variance: Vec<usize>,
}

/// Sample Pearson correlation of the observed curves, eigendecomposed with
/// the same quadrature as the latent analysis.
pub fn naive_fpca_baseline(data: &ObservationSet, retain: Retain, policy: ZeroVariance) -> Result<Baseline> {
    let rows = data
        .dense_rows()
        .ok_or_else(|| FsgcError::InsufficientData("naive FPCA needs complete data".into()))?;
    let (correlation, zero_variance) = pearson_correlation(&rows, policy)?;
    let eigen = latent::eigendecompose(&correlation, data.grid(), retain)?;
    Ok(Baseline {
        correlation,
        eigen,
        zero_variance,
    })
}

/// Mean over subjects of the exact-match rate at grid points the subject
/// was not observed at. Subjects without held-out points are skipped.
pub fn accuracy(truth: &[Vec<f64>], predicted: &[Vec<f64>], observed: &[Vec<bool>]) -> Result<f64> {
    if truth.len() != predicted.len() || truth.len() != observed.len() {
        return Err(FsgcError::DimensionMismatch {
            left: truth.len(),
            right: predicted.len().min(observed.len()),
        });
    }
    let mut sum = 0.0;
    let mut subjects = 0usize;
    for ((t, p), o) in truth.iter().zip(predicted).zip(observed) {
        if t.len() != p.len() || t.len() != o.len() {
            return Err(FsgcError::GridMismatch {
                expected: t.len(),
                actual: p.len(),
            });
        }
        let held: Vec<usize> = (0..t.len()).filter(|&j| !o[j]).collect();
        if held.is_empty() {
            continue;
        }
        let hits = held.iter().filter(|&&j| t[j] == p[j]).count();
        sum += hits as f64 / held.len() as f64;
        subjects += 1;
    }
    if subjects == 0 {
        return Err(FsgcError::NoHeldOutPoints);
    }
    Ok(sum / subjects as f64)
}

/// Pearson correlation of two equally long samples; NaN if either is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return f64::NAN;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return f64::NAN;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marginal::VariableKind;
    use crate::simgen::uniform_grid;

    #[test]
    fn ise_examples() {
        let g = uniform_grid(201);
        let a = DMatrix::from_fn(201, 201, |i, j| (g[i] * g[j]).sin());
        assert_eq!(ise(&a, &a, &g).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.1);
        assert!((ise(&a, &shifted, &g).unwrap() - 0.01).abs() < 1e-6);
        assert!(matches!(ise(&a, &a, &g[..10]), Err(FsgcError::GridMismatch { .. })));
    }

    #[test]
    fn ise_converges_under_refinement() {
        let diff = |s: f64, t: f64| 0.3 * (3.0 * s).cos() * (2.0 * t).sin() + 0.1 * s * t;
        let val = |m: usize| {
            let g = uniform_grid(m);
            let d = DMatrix::from_fn(m, m, |i, j| diff(g[i], g[j]));
            ise(&DMatrix::zeros(m, m), &d, &g).unwrap()
        };
        assert!((val(50) - val(200)).abs() < 1e-4);
    }

    #[test]
    fn accuracy_examples() {
        let truth = vec![vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]];
        let mask = vec![vec![true, false, false], vec![false, true, false]];
        assert_eq!(accuracy(&truth, &truth, &mask).unwrap(), 1.0);
        let wrong: Vec<Vec<f64>> = truth.iter().map(|r| r.iter().map(|v| 1.0 - v).collect()).collect();
        assert_eq!(accuracy(&truth, &wrong, &mask).unwrap(), 0.0);
        let all = vec![vec![true; 3]; 2];
        assert!(matches!(accuracy(&truth, &truth, &all), Err(FsgcError::NoHeldOutPoints)));
    }

    #[test]
    fn constant_column_is_an_error() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 0.5]];
        assert!(matches!(
            pearson_correlation(&rows, ZeroVariance::Error),
            Err(FsgcError::ZeroVariance { time_index: 0 })
        ));
        let (c, zero) = pearson_correlation(&rows, ZeroVariance::Uncorrelated).unwrap();
        assert_eq!(zero, vec![0]);
        assert_eq!(c[(0, 1)], 0.0);
        let obs = ObservationSet::from_dense(VariableKind::Continuous, uniform_grid(2), &rows).unwrap();
        assert!(naive_fpca_baseline(&obs, Retain::Fixed(1), ZeroVariance::Error).is_err());
    }

    #[test]
    fn baseline_is_not_rank_invariant() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let a = (i as f64 * 0.37).sin();
                let b = (i as f64 * 1.3).cos();
                vec![a, a + 0.5 * b, b]
            })
            .collect();
        let cubed: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v.powi(3)).collect()).collect();
        let (c1, _) = pearson_correlation(&rows, ZeroVariance::Error).unwrap();
        let (c2, _) = pearson_correlation(&cubed, ZeroVariance::Error).unwrap();
        assert!((c1 - c2).amax() > 1e-3);
    }

    #[test]
    fn correlation_basics() {
        assert!((correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert!(correlation(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
    }
}
