//! Latent eigenanalysis, latent trajectories, principal component scores,
//! curve prediction at new times and score distances.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FsgcError, Result};
use crate::fit::{self, LatentCorrelationModel};
use crate::marginal::Marginals;
use crate::rank::nearest_index;

const NOT_PSD: f64 = -1e-6;
const CONDITIONING_RIDGE: f64 = 1e-8;

/// Trapezoidal weights on a sorted grid.
pub fn trapezoid_weights(grid: &[f64]) -> Result<Vec<f64>> {
    let m = grid.len();
    if m < 2 {
        return Err(FsgcError::InsufficientData(format!(
            "quadrature needs at least 2 grid points, got {m}"
        )));
    }
    let mut w = vec![0.0; m];
    for j in 0..m - 1 {
        let h = 0.5 * (grid[j + 1] - grid[j]);
        w[j] += h;
        w[j + 1] += h;
    }
    Ok(w)
}

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retain {
    /// Smallest count reaching this share of the eigenvalue mass.
    Pve(f64),
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
    /// All eigenvalues, descending, negatives clipped to zero.
    pub eigenvalues: Vec<f64>,
    /// `M × K` retained eigenfunctions on the grid.
    pub eigenfunctions: DMatrix<f64>,
    /// Latent mean, identically zero.
    pub mean: Vec<f64>,
    pub retained: usize,
}

impl EigenSystem {
    pub fn retained_eigenvalues(&self) -> &[f64] {
        &self.eigenvalues[..self.retained]
    }

    /// Share of the eigenvalue mass carried by the retained components.
    pub fn explained(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        if total > 0.0 {
            self.retained_eigenvalues().iter().sum::<f64>() / total
        } else {
            0.0
        }
    }
}

/// Weighted eigenproblem `W^{1/2} C W^{1/2}` with eigenfunctions mapped back
/// by `W^{−1/2}` and signed positive at their largest magnitude.
pub fn eigendecompose(corr: &DMatrix<f64>, grid: &[f64], retain: Retain) -> Result<EigenSystem> {
    let m = grid.len();
    if corr.nrows() != m || corr.ncols() != m {
        return Err(FsgcError::GridMismatch {
            expected: m,
            actual: corr.nrows(),
        });
    }
    let raw_min = SymmetricEigen::new(corr.clone()).eigenvalues.min();
    if raw_min < NOT_PSD {
        return Err(FsgcError::NotPsd {
            min_eigenvalue: raw_min,
        });
    }
    let weights = trapezoid_weights(grid)?;
    let root: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let weighted = DMatrix::from_fn(m, m, |i, j| root[i] * corr[(i, j)] * root[j]);
    let eig = SymmetricEigen::new(weighted);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();

    let retained = match retain {
        Retain::Fixed(k) => {
            if k == 0 || k > m {
                return Err(FsgcError::InvalidInput(format!(
                    "cannot retain {k} components on a {m}-point grid"
                )));
            }
            k
        }
        Retain::Pve(target) => {
            if !(target > 0.0 && target <= 1.0) {
                return Err(FsgcError::InvalidInput(format!("pve target {target} outside (0, 1]")));
            }
            let total: f64 = eigenvalues.iter().sum();
            let mut acc = 0.0;
            let mut k = m;
            for (i, v) in eigenvalues.iter().enumerate() {
                acc += v;
                if acc >= target * total * (1.0 - 1e-12) {
                    k = i + 1;
                    break;
                }
            }
            k
        }
    };

    let mut eigenfunctions = DMatrix::zeros(m, retained);
    for (c, &idx) in order.iter().take(retained).enumerate() {
        let mut psi: Vec<f64> = (0..m).map(|j| eig.eigenvectors[(j, idx)] / root[j]).collect();
        let peak = psi
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(j, _)| j)
            .unwrap_or(0);
        if psi[peak] < 0.0 {
            psi.iter_mut().for_each(|v| *v = -*v);
        }
        eigenfunctions.set_column(c, &DVector::from_vec(psi));
    }
    Ok(EigenSystem {
        grid: grid.to_vec(),
        weights,
        eigenvalues,
        eigenfunctions,
        mean: vec![0.0; m],
        retained,
    })
}

/// A subject's latent trajectory on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub values: Vec<f64>,
    /// A ridge was needed to invert the observed block.
    pub ridged: bool,
}

/// Cholesky of the observed block, adding a small ridge if needed.
fn factor_observed(block: DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, bool)> {
    if let Some(ch) = block.clone().cholesky() {
        return Ok((ch, false));
    }
    let mut ridged = block;
    for i in 0..ridged.nrows() {
        ridged[(i, i)] += CONDITIONING_RIDGE;
    }
    ridged
        .cholesky()
        .map(|ch| (ch, true))
        .ok_or_else(|| FsgcError::NumericalFailure("observed correlation block is singular".into()))
}

/// Univariate latent means at the observed grid indices, skipping time
/// points without usable margins.
fn observed_latent_means(obs: &[(usize, f64)], marginals: &Marginals) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut idx = Vec::with_capacity(obs.len());
    let mut vals = Vec::with_capacity(obs.len());
    for &(j, x) in obs {
        if let Some(v) = marginals.latent_mean(j, x)? {
            idx.push(j);
            vals.push(v);
        }
    }
    if idx.is_empty() {
        return Err(FsgcError::InsufficientData(
            "subject has no observation at a usable time point".into(),
        ));
    }
    Ok((idx, vals))
}

/// Univariate conditional means at observed grid points, extended to the
/// rest of the grid by `C^{NO} (C^{OO})⁻¹ V^O`.
pub fn latent_trajectory(obs: &[(usize, f64)], corr: &DMatrix<f64>, marginals: &Marginals) -> Result<Trajectory> {
    let m = corr.nrows();
    if let Some(&(j, _)) = obs.iter().find(|(j, _)| *j >= m) {
        return Err(FsgcError::GridMismatch { expected: m, actual: j + 1 });
    }
    let (idx, vals) = observed_latent_means(obs, marginals)?;
    let block = DMatrix::from_fn(idx.len(), idx.len(), |a, b| corr[(idx[a], idx[b])]);
    let (ch, ridged) = factor_observed(block)?;
    let alpha = ch.solve(&DVector::from_vec(vals.clone()));
    let mut values = vec![0.0; m];
    for (j, v) in values.iter_mut().enumerate() {
        *v = idx.iter().zip(alpha.iter()).map(|(&o, a)| corr[(j, o)] * a).sum();
    }
    for (&o, &v) in idx.iter().zip(&vals) {
        values[o] = v;
    }
    Ok(Trajectory { values, ridged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// `n × K` scores.
    pub scores: DMatrix<f64>,
    /// Sample variance of each score column.
    pub variances: Vec<f64>,
}

/// Trapezoidal inner products of each trajectory with the eigenfunctions.
pub fn latent_scores(trajectories: &[Vec<f64>], eig: &EigenSystem) -> Result<ScoreMatrix> {
    let m = eig.grid.len();
    let k = eig.retained;
    let n = trajectories.len();
    let mut scores = DMatrix::zeros(n, k);
    for (i, v) in trajectories.iter().enumerate() {
        if v.len() != m {
            return Err(FsgcError::GridMismatch {
                expected: m,
                actual: v.len(),
            });
        }
        for c in 0..k {
            scores[(i, c)] = (0..m)
                .map(|j| eig.weights[j] * (v[j] - eig.mean[j]) * eig.eigenfunctions[(j, c)])
                .sum();
        }
    }
    let variances = (0..k)
        .map(|c| {
            if n < 2 {
                return 0.0;
            }
            let col = scores.column(c);
            let mean = col.mean();
            col.iter().map(|s: &f64| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect();
    Ok(ScoreMatrix { scores, variances })
}

/// Trajectories for many subjects against one correlation matrix.
pub fn latent_trajectories(
    subjects: &[Vec<(usize, f64)>],
    corr: &DMatrix<f64>,
    marginals: &Marginals,
) -> Result<Vec<Trajectory>> {
    subjects
        .par_iter()
        .map(|obs| latent_trajectory(obs, corr, marginals))
        .collect()
}

/// Prediction of one subject's curve at new times.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePrediction {
    pub times: Vec<f64>,
    pub latent: Vec<f64>,
    /// Observed-scale values; `None` where no margin is available.
    pub observed: Vec<Option<f64>>,
    /// Conditional covariance of the latent values at the new times.
    pub covariance: DMatrix<f64>,
    pub ridged: bool,
}

/// Conditional mean and covariance of the latent process at `new_times`
/// given a subject's observations `(time, value)`. Times are matched to the
/// marginal grid by nearest point.
pub fn predict_curve(
    obs: &[(f64, f64)],
    model: &LatentCorrelationModel,
    marginals: &Marginals,
    new_times: &[f64],
) -> Result<CurvePrediction> {
    let grid = &marginals.cutoffs.grid;
    if let Some(t) = obs.iter().map(|o| o.0).chain(new_times.iter().copied()).find(|t| !(0.0..=1.0).contains(t)) {
        return Err(FsgcError::OutOfDomain(format!("time {t} outside [0, 1]")));
    }
    let indexed: Vec<(usize, f64)> = obs.iter().map(|&(t, x)| (nearest_index(grid, t), x)).collect();
    let mut o_times = Vec::new();
    let mut o_vals = Vec::new();
    for (&(t, _), &(j, x)) in obs.iter().zip(&indexed) {
        if let Some(v) = marginals.latent_mean(j, x)? {
            o_times.push(t);
            o_vals.push(v);
        }
    }
    if o_times.is_empty() {
        return Err(FsgcError::InsufficientData(
            "subject has no observation at a usable time point".into(),
        ));
    }
    let all: Vec<f64> = o_times.iter().chain(new_times).copied().collect();
    let p = o_times.len();
    let q = new_times.len();
    // Project over distinct times so repeated times stay perfectly correlated.
    let mut distinct = all.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let slot: Vec<usize> = all
        .iter()
        .map(|t| distinct.partition_point(|d| d.total_cmp(t).is_lt()))
        .collect();
    let u = distinct.len();
    let mut raw = DMatrix::identity(u, u);
    for a in 0..u {
        for b in a + 1..u {
            let c = model.correlation(distinct[a], distinct[b])?;
            raw[(a, b)] = c;
            raw[(b, a)] = c;
        }
    }
    let (projected, _) = fit::project_to_correlation(&raw);
    let c = DMatrix::from_fn(p + q, p + q, |a, b| projected[(slot[a], slot[b])]);
    let c_oo = c.view((0, 0), (p, p)).into_owned();
    let c_no = c.view((p, 0), (q, p)).into_owned();
    let c_nn = c.view((p, p), (q, q)).into_owned();
    let (ch, ridged) = factor_observed(c_oo)?;
    let v_o = DVector::from_vec(o_vals);
    let latent_vec = &c_no * ch.solve(&v_o);
    let cross = ch.solve(&c_no.transpose());
    let mut covariance = &c_nn - &c_no * cross;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let mut latent: Vec<f64> = latent_vec.iter().copied().collect();
    // Times already observed are known exactly; avoid solve roundoff there.
    for k in 0..q {
        if let Some(a) = (0..p).find(|&a| slot[a] == slot[p + k]) {
            latent[k] = v_o[a];
            covariance.row_mut(k).fill(0.0);
            covariance.column_mut(k).fill(0.0);
        }
    }
    let observed = new_times
        .iter()
        .zip(&latent)
        .map(|(&t, &v)| marginals.observed_value(nearest_index(grid, t), v))
        .collect();
    Ok(CurvePrediction {
        times: new_times.to_vec(),
        latent,
        observed,
        covariance,
        ridged,
    })
}

/// Euclidean distance between two score vectors.
pub fn latent_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FsgcError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}
