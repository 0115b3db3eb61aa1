//! Clamped cubic B-splines on `[0, 1]`, the symmetric tensor-product surface
//! and the `tanh(x/2)` link mapping it into `(−1, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{FsgcError, Result};

const DEGREE: usize = 3;

/// Cubic B-spline basis with equally spaced interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    dim: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Basis of dimension `dim` (at least 4), i.e. `dim − 4` interior knots.
    pub fn new(dim: usize) -> Result<Self> {
        if dim < DEGREE + 1 {
            return Err(FsgcError::InvalidInput(format!(
                "cubic basis dimension must be at least 4, got {dim}"
            )));
        }
        let interior = dim - DEGREE - 1;
        let mut knots = vec![0.0; DEGREE + 1];
        knots.extend((1..=interior).map(|i| i as f64 / (interior + 1) as f64));
        knots.extend([1.0; DEGREE + 1]);
        Ok(SplineBasis { dim, knots })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        DEGREE
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior_knot_count(&self) -> usize {
        self.dim - DEGREE - 1
    }

    /// All `dim` basis values at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FsgcError::OutOfDomain(format!("basis argument {t} outside [0, 1]")));
        }
        let span = self.span(t);
        let local = self.nonzero(span, t);
        let mut out = vec![0.0; self.dim];
        out[span - DEGREE..=span].copy_from_slice(&local);
        Ok(out)
    }

    /// Knot span `i` with `knots[i] ≤ t < knots[i+1]`; the last span at `t = 1`.
    fn span(&self, t: f64) -> usize {
        if t >= 1.0 {
            return self.dim - 1;
        }
        self.knots.partition_point(|&k| k <= t) - 1
    }

    /// Cox–de Boor recursion for the `DEGREE + 1` functions nonzero on `span`.
    fn nonzero(&self, span: usize, t: f64) -> [f64; DEGREE + 1] {
        let k = &self.knots;
        let mut n = [0.0; DEGREE + 1];
        let mut left = [0.0; DEGREE + 1];
        let mut right = [0.0; DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = t - k[span + 1 - j];
            right[j] = k[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }
}

/// `g(x) = (eˣ − 1)/(eˣ + 1) = tanh(x/2)`.
pub fn link(x: f64) -> f64 {
    (0.5 * x).tanh()
}

/// `g'(x) = (1 − g(x)²)/2`.
pub fn link_derivative(x: f64) -> f64 {
    let c = 0.5 * x;
    if c.abs() > 20.0 {
        // 1 − tanh² loses everything here; use the exponential tail directly.
        2.0 * (-2.0 * c.abs()).exp()
    } else {
        let g = c.tanh();
        0.5 * (1.0 - g) * (1.0 + g)
    }
}

/// `g⁻¹(c) = 2 atanh(c)` for `|c| < 1`.
pub fn link_inverse(c: f64) -> Result<f64> {
    if c.is_nan() || c.abs() >= 1.0 {
        return Err(FsgcError::OutOfDomain(format!("link inverse needs |c| < 1, got {c}")));
    }
    Ok(2.0 * c.atanh())
}

/// Symmetric `d × d` coefficient matrix stored by its upper triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMatrix {
    dim: usize,
    /// Row-major upper triangle including the diagonal.
    params: Vec<f64>,
}

impl CoefficientMatrix {
    pub fn zeros(dim: usize) -> Self {
        CoefficientMatrix {
            dim,
            params: vec![0.0; n_params(dim)],
        }
    }

    pub fn from_params(dim: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != n_params(dim) {
            return Err(FsgcError::DimensionMismatch {
                left: n_params(dim),
                right: params.len(),
            });
        }
        Ok(CoefficientMatrix { dim, params })
    }

    /// Takes the upper triangle of a square row-major matrix.
    pub fn from_upper(full: &[Vec<f64>]) -> Result<Self> {
        let dim = full.len();
        let mut params = Vec::with_capacity(n_params(dim));
        for (k, row) in full.iter().enumerate() {
            if row.len() != dim {
                return Err(FsgcError::DimensionMismatch {
                    left: dim,
                    right: row.len(),
                });
            }
            params.extend_from_slice(&row[k..]);
        }
        Ok(CoefficientMatrix { dim, params })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        let (a, b) = if k <= l { (k, l) } else { (l, k) };
        self.params[param_index(self.dim, a, b)]
    }

    pub fn to_full(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|k| (0..self.dim).map(|l| self.get(k, l)).collect())
            .collect()
    }
}

/// `d(d+1)/2`.
pub fn n_params(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

fn param_index(dim: usize, k: usize, l: usize) -> usize {
    k * dim - k * (k + 1) / 2 + l
}

/// Row of the symmetric tensor design: the linear predictor is its dot
/// product with the stored parameters.
pub fn design_row(bs: &[f64], bt: &[f64]) -> Vec<f64> {
    let d = bs.len();
    let mut row = Vec::with_capacity(n_params(d));
    for k in 0..d {
        row.push(bs[k] * bt[k]);
        for l in k + 1..d {
            row.push(bs[k] * bt[l] + bs[l] * bt[k]);
        }
    }
    row
}

/// `Σ_k Σ_l u_kl B_k(s) B_l(t)` from precomputed basis values.
pub fn linear_predictor(u: &CoefficientMatrix, bs: &[f64], bt: &[f64]) -> f64 {
    design_row(bs, bt)
        .iter()
        .zip(&u.params)
        .map(|(x, p)| x * p)
        .sum()
}

const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Correlation surface `g(Σ u_kl B_k(s) B_l(t))`. Meant for `s ≠ t`; the
/// value at `s = t` is the model extrapolation, not the unit diagonal.
pub fn eval_surface(u: &CoefficientMatrix, basis: &SplineBasis, s: f64, t: f64) -> Result<f64> {
    if u.dim != basis.dim {
        return Err(FsgcError::DimensionMismatch {
            left: u.dim,
            right: basis.dim,
        });
    }
    let bs = basis.eval(s)?;
    let bt = basis.eval(t)?;
    Ok(link(linear_predictor(u, &bs, &bt)).clamp(-BELOW_ONE, BELOW_ONE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_interpolation() {
        let b = SplineBasis::new(7).unwrap();
        assert_eq!(b.interior_knot_count(), 3);
        let v0 = b.eval(0.0).unwrap();
        assert_eq!(v0[0], 1.0);
        assert!(v0[1..].iter().all(|&v| v == 0.0));
        let v1 = b.eval(1.0).unwrap();
        assert_eq!(v1[6], 1.0);
        assert!(v1[..6].iter().all(|&v| v == 0.0));
        let mid = b.eval(0.37).unwrap();
        assert!((mid.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(mid.iter().all(|&v| v >= 0.0));
        assert!(b.eval(1.01).is_err());
        assert!(SplineBasis::new(3).is_err());
    }

    #[test]
    fn single_segment_is_bernstein() {
        // With no interior knots the basis is the cubic Bernstein basis.
        let b = SplineBasis::new(4).unwrap();
        let t: f64 = 0.3;
        let expect = [
            (1.0 - t).powi(3),
            3.0 * t * (1.0 - t).powi(2),
            3.0 * t * t * (1.0 - t),
            t.powi(3),
        ];
        for (a, e) in b.eval(t).unwrap().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn link_examples() {
        assert_eq!(link(0.0), 0.0);
        assert!((link(40.0) - 1.0).abs() < 1e-12);
        assert!((link(2.0 * 0.5f64.atanh()) - 0.5).abs() < 1e-15);
        assert!((link_inverse(link(1.7)).unwrap() - 1.7).abs() < 1e-12);
        assert!(link_inverse(1.0).is_err());
        for &x in &[-3.0, -0.2, 0.0, 0.9, 5.0, 45.0] {
            let e = 1e-5;
            let fd = (link(x + e) - link(x - e)) / (2.0 * e);
            assert!((fd - link_derivative(x)).abs() < 1e-6);
        }
    }

    #[test]
    fn parameter_layout() {
        let full = vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 5.0], vec![3.0, 5.0, 6.0]];
        let u = CoefficientMatrix::from_upper(&full).unwrap();
        assert_eq!(u.params(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(u.to_full(), full);
        assert_eq!(u.get(2, 1), 5.0);
    }

    #[test]
    fn surface_examples() {
        let b = SplineBasis::new(7).unwrap();
        let zero = CoefficientMatrix::zeros(7);
        assert_eq!(eval_surface(&zero, &b, 0.2, 0.8).unwrap(), 0.0);

        let v = [0.3, -0.1, 0.5, 0.2, -0.4, 0.1, 0.6];
        let c = 0.8;
        let full: Vec<Vec<f64>> = v.iter().map(|a| v.iter().map(|b| c * a * b).collect()).collect();
        let u = CoefficientMatrix::from_upper(&full).unwrap();
        let (s, t) = (0.15, 0.72);
        let vs: f64 = b.eval(s).unwrap().iter().zip(&v).map(|(x, y)| x * y).sum();
        let vt: f64 = b.eval(t).unwrap().iter().zip(&v).map(|(x, y)| x * y).sum();
        let got = eval_surface(&u, &b, s, t).unwrap();
        assert!((got - link(c * vs * vt)).abs() < 1e-14);
        assert_eq!(got, eval_surface(&u, &b, t, s).unwrap());
    }
}
