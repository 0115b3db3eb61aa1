//! Latent correlation surface by Gauss–Newton least squares on Kendall's tau
//! residuals, and reconstruction of valid correlation matrices on a grid.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{self, CoefficientMatrix, SplineBasis};
use crate::bridge::{self, BridgeContext, R_INTERIOR};
use crate::error::{FsgcError, Result};
use crate::marginal::{CutoffSet, VariableKind};
use crate::rank::TauMatrix;

/// Inverse-bridged correlations are clamped to this magnitude before the
/// link inverse when building starting values.
pub const INIT_CLAMP: f64 = 0.99;

const RELATIVE_DECREASE_TOL: f64 = 1e-12;
const MAX_DAMPING_ESCALATIONS: usize = 8;
const RETRY_DAMPING_STEPS: usize = 14;
const SVD_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    InverseBridge,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub basis_dim: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub max_halvings: usize,
    pub c0: u64,
    pub init: InitMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            basis_dim: 7,
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            max_halvings: 30,
            c0: 5,
            init: InitMode::InverseBridge,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.basis_dim < 4
            || self.max_iterations == 0
            || !(self.gradient_tolerance > 0.0)
            || self.max_halvings == 0
        {
            return Err(FsgcError::InvalidInput(format!("invalid fit configuration {self:?}")));
        }
        Ok(())
    }
}

struct FitPair {
    tau: f64,
    ctx: BridgeContext,
    design: Vec<f64>,
}

/// Sum of squared tau residuals over supported upper-triangle pairs.
pub struct Objective {
    pairs: Vec<FitPair>,
    n_params: usize,
}

impl Objective {
    /// Collects supported pairs whose time points both carry usable cutoffs.
    pub fn new(tau: &TauMatrix, cutoffs: &CutoffSet, basis: &SplineBasis) -> Result<Self> {
        if tau.len() != cutoffs.len() {
            return Err(FsgcError::GridMismatch {
                expected: cutoffs.len(),
                actual: tau.len(),
            });
        }
        let values: Vec<Vec<f64>> = tau.grid.iter().map(|&t| basis.eval(t)).collect::<Result<_>>()?;
        let mut pairs = Vec::new();
        for (j, k) in tau.supported_pairs() {
            if let Some(ctx) = cutoffs.bridge_context(j, k) {
                pairs.push(FitPair {
                    tau: tau.tau[(j, k)],
                    ctx,
                    design: basis::design_row(&values[j], &values[k]),
                });
            }
        }
        let n_params = basis::n_params(basis.dim());
        if pairs.len() < n_params {
            return Err(FsgcError::NotEnoughPairs {
                supported: pairs.len(),
                required: n_params,
            });
        }
        Ok(Objective { pairs, n_params })
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn predictor(pair: &FitPair, theta: &[f64]) -> f64 {
        pair.design.iter().zip(theta).map(|(x, p)| x * p).sum()
    }

    fn correlation(eta: f64) -> f64 {
        basis::link(eta).clamp(-R_INTERIOR, R_INTERIOR)
    }

    pub fn residuals(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.pairs
            .par_iter()
            .map(|p| {
                let r = Self::correlation(Self::predictor(p, theta));
                Ok(p.tau - bridge::bridge_forward(r, &p.ctx)?)
            })
            .collect()
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.residuals(theta)?.iter().map(|r| r * r).sum())
    }

    /// Residuals and their Jacobian with respect to the parameters.
    pub fn residuals_and_jacobian(&self, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let rows: Vec<(f64, f64)> = self
            .pairs
            .par_iter()
            .map(|p| {
                let eta = Self::predictor(p, theta);
                let r = Self::correlation(eta);
                let f = bridge::bridge_forward(r, &p.ctx)?;
                let df = bridge::bridge_derivative(r, &p.ctx)?;
                Ok((p.tau - f, -df * basis::link_derivative(eta)))
            })
            .collect::<Result<_>>()?;
        let res = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.0));
        let mut jac = DMatrix::zeros(rows.len(), self.n_params);
        for (i, (p, &(_, scale))) in self.pairs.iter().zip(&rows).enumerate() {
            for (c, x) in p.design.iter().enumerate() {
                jac[(i, c)] = scale * x;
            }
        }
        Ok((res, jac))
    }
}

/// Starting coefficients and how they were obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub coefficients: CoefficientMatrix,
    /// The least-squares design was rank deficient and zeros were used.
    pub fallback: bool,
    /// Pairs whose tau was outside the attainable range.
    pub clamped: usize,
}

/// Inverse-bridges each supported tau, maps it through the link inverse and
/// regresses the result on the symmetric tensor design.
pub fn initialize_coefficients(tau: &TauMatrix, cutoffs: &CutoffSet, basis: &SplineBasis) -> Result<Initialization> {
    let objective = Objective::new(tau, cutoffs, basis)?;
    initialize_from(&objective, basis.dim())
}

fn initialize_from(objective: &Objective, dim: usize) -> Result<Initialization> {
    let inverted: Vec<(f64, bool)> = objective
        .pairs
        .par_iter()
        .map(|p| {
            let inv = bridge::bridge_inverse(p.tau, &p.ctx)?;
            let r = inv.r.clamp(-INIT_CLAMP, INIT_CLAMP);
            Ok((basis::link_inverse(r)?, inv.clamped))
        })
        .collect::<Result<_>>()?;
    let clamped = inverted.iter().filter(|x| x.1).count();
    let p = objective.n_params;
    let design = DMatrix::from_fn(objective.pairs.len(), p, |i, c| objective.pairs[i].design[c]);
    let z = DVector::from_iterator(inverted.len(), inverted.iter().map(|x| x.0));
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let solved = if smax > 0.0 && smin / smax > SVD_RANK_TOL {
        svd.solve(&z, 0.0).ok()
    } else {
        None
    };
    Ok(match solved {
        Some(theta) => Initialization {
            coefficients: CoefficientMatrix::from_params(dim, theta.as_slice().to_vec())?,
            fallback: false,
            clamped,
        },
        None => Initialization {
            coefficients: CoefficientMatrix::zeros(dim),
            fallback: true,
            clamped,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub pairs: usize,
    pub init_fallback: bool,
    pub init_clamped: usize,
    pub damping_escalations: usize,
    pub unusable_time_points: usize,
    /// Objective before the first step and after each accepted step.
    pub trace: Vec<f64>,
}

/// Fitted correlation surface with the margins it was fitted under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCorrelationModel {
    pub basis: SplineBasis,
    pub coefficients: CoefficientMatrix,
    pub cutoffs: CutoffSet,
    pub kind: VariableKind,
    pub diagnostics: FitDiagnostics,
}

impl LatentCorrelationModel {
    /// Model correlation; exactly 1 at `s = t`.
    pub fn correlation(&self, s: f64, t: f64) -> Result<f64> {
        if s == t {
            if !(0.0..=1.0).contains(&s) {
                return Err(FsgcError::OutOfDomain(format!("time {s} outside [0, 1]")));
            }
            return Ok(1.0);
        }
        basis::eval_surface(&self.coefficients, &self.basis, s, t)
    }

    /// Re-evaluates the least-squares objective on `tau`.
    pub fn training_objective(&self, tau: &TauMatrix) -> Result<f64> {
        Objective::new(tau, &self.cutoffs, &self.basis)?.value(self.coefficients.params())
    }
}

/// Solves `(A + λI) δ = b`, escalating `λ` tenfold when `A` is not positive
/// definite. Returns the step and the number of escalations used.
fn damped_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok((ch.solve(b), 0));
    }
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut lambda = 1e-10 * scale;
    for esc in 1..=MAX_DAMPING_ESCALATIONS {
        let mut damped = a.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += lambda;
        }
        if let Some(ch) = damped.cholesky() {
            return Ok((ch.solve(b), esc));
        }
        lambda *= 10.0;
    }
    Err(FsgcError::SingularNormalEquations {
        escalations: MAX_DAMPING_ESCALATIONS,
    })
}

/// Levenberg steps with growing damping, used when halving the Gauss–Newton
/// step fails. Large damping approaches a short gradient step.
fn damped_retry(
    objective: &Objective,
    theta: &DVector<f64>,
    normal: &DMatrix<f64>,
    grad: &DVector<f64>,
    value: f64,
) -> Result<(Option<(DVector<f64>, f64)>, usize)> {
    let scale = normal.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut lambda = 1e-8 * scale;
    for esc in 1..=RETRY_DAMPING_STEPS {
        let mut damped = normal.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += lambda;
        }
        if let Some(ch) = damped.cholesky() {
            let trial = theta - ch.solve(grad);
            let trial_value = objective.value(trial.as_slice())?;
            if trial_value < value {
                return Ok((Some((trial, trial_value)), esc));
            }
        }
        lambda *= 10.0;
    }
    Ok((None, RETRY_DAMPING_STEPS))
}

/// Gauss–Newton with step halving. A model that hits the iteration limit is
/// returned with `converged = false`.
pub fn fit_latent_correlation(tau: &TauMatrix, cutoffs: &CutoffSet, cfg: &FitConfig) -> Result<LatentCorrelationModel> {
    cfg.validate()?;
    let basis = SplineBasis::new(cfg.basis_dim)?;
    let objective = Objective::new(tau, cutoffs, &basis)?;
    let init = match cfg.init {
        InitMode::InverseBridge => initialize_from(&objective, basis.dim())?,
        InitMode::Zeros => Initialization {
            coefficients: CoefficientMatrix::zeros(basis.dim()),
            fallback: false,
            clamped: 0,
        },
    };
    let mut theta = DVector::from_column_slice(init.coefficients.params());
    let (mut res, mut jac) = objective.residuals_and_jacobian(theta.as_slice())?;
    let mut value = res.norm_squared();
    let initial_objective = value;
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    let mut escalations = 0;
    let mut grad_norm;
    loop {
        let grad = jac.tr_mul(&res);
        grad_norm = grad.amax();
        if grad_norm < cfg.gradient_tolerance || value == 0.0 {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iterations {
            break;
        }
        iterations += 1;
        let normal = jac.tr_mul(&jac);
        let (step, esc) = damped_solve(&normal, &(-&grad))?;
        escalations += esc;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial = &theta + &step * alpha;
            let trial_value = objective.value(trial.as_slice())?;
            if trial_value < value {
                accepted = Some((trial, trial_value));
                break;
            }
            alpha *= 0.5;
        }
        if accepted.is_none() {
            let (found, esc) = damped_retry(&objective, &theta, &normal, &grad, value)?;
            escalations += esc;
            accepted = found;
        }
        let Some((next, next_value)) = accepted else {
            // Neither halving nor damping lowers the objective: the relative
            // decrease is zero.
            converged = true;
            break;
        };
        let decrease = (value - next_value) / value;
        theta = next;
        value = next_value;
        trace.push(value);
        (res, jac) = objective.residuals_and_jacobian(theta.as_slice())?;
        if decrease < RELATIVE_DECREASE_TOL {
            grad_norm = jac.tr_mul(&res).amax();
            converged = true;
            break;
        }
    }
    let unusable = cutoffs.len() - cutoffs.usable_count();
    Ok(LatentCorrelationModel {
        coefficients: CoefficientMatrix::from_params(basis.dim(), theta.as_slice().to_vec())?,
        basis,
        cutoffs: cutoffs.clone(),
        kind: cutoffs.kind,
        diagnostics: FitDiagnostics {
            objective: value,
            initial_objective,
            iterations,
            converged,
            gradient_norm: grad_norm,
            pairs: objective.n_pairs(),
            init_fallback: init.fallback,
            init_clamped: init.clamped,
            damping_escalations: escalations,
            unusable_time_points: unusable,
            trace,
        },
    })
}

/// Record of the nearest-correlation projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub applied: bool,
    pub iterations: usize,
    /// Frobenius distance between the input and the output.
    pub distance: f64,
    pub min_eigenvalue_before: f64,
}

const PSD_SKIP: f64 = -1e-10;
const EIGEN_FLOOR: f64 = 1e-8;
const DIAGONAL_TOL: f64 = 1e-10;
const MAX_PROJECTION_ITERS: usize = 100;

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Clips eigenvalues at `1e−8` and rescales to a unit diagonal until the
/// matrix is a valid correlation matrix.
pub fn project_to_correlation(m: &DMatrix<f64>) -> (DMatrix<f64>, Projection) {
    let before = min_eigenvalue(m);
    let diag_ok = |a: &DMatrix<f64>| a.diagonal().iter().all(|d| (d - 1.0).abs() <= DIAGONAL_TOL);
    if before >= PSD_SKIP && diag_ok(m) {
        return (
            m.clone(),
            Projection {
                applied: false,
                iterations: 0,
                distance: 0.0,
                min_eigenvalue_before: before,
            },
        );
    }
    let mut a = m.clone();
    let mut iterations = 0;
    while iterations < MAX_PROJECTION_ITERS {
        iterations += 1;
        let eig = SymmetricEigen::new(a.clone());
        let clipped = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
        let v = &eig.eigenvectors;
        a = v * DMatrix::from_diagonal(&clipped) * v.transpose();
        let scale = a.diagonal().map(|d| 1.0 / d.sqrt());
        let n = a.nrows();
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] *= scale[i] * scale[j];
            }
        }
        a = (&a + a.transpose()) * 0.5;
        if diag_ok(&a) && min_eigenvalue(&a) >= -EIGEN_FLOOR {
            break;
        }
    }
    for i in 0..a.nrows() {
        a[(i, i)] = 1.0;
    }
    let distance = (&a - m).norm();
    (
        a,
        Projection {
            applied: true,
            iterations,
            distance,
            min_eigenvalue_before: before,
        },
    )
}

/// A correlation matrix on a grid with its projection record.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub grid: Vec<f64>,
    pub matrix: DMatrix<f64>,
    pub projection: Projection,
}

/// Evaluates the fitted surface on `grid` (unit diagonal) and projects the
/// result onto the correlation matrices.
pub fn reconstruct_correlation(model: &LatentCorrelationModel, grid: &[f64]) -> Result<Reconstruction> {
    let values: Vec<Vec<f64>> = grid.iter().map(|&t| model.basis.eval(t)).collect::<Result<_>>()?;
    let m = grid.len();
    let mut raw = DMatrix::identity(m, m);
    for j in 0..m {
        for k in j + 1..m {
            let c = if grid[j] == grid[k] {
                1.0
            } else {
                basis::link(basis::linear_predictor(&model.coefficients, &values[j], &values[k]))
                    .clamp(-R_INTERIOR, R_INTERIOR)
            };
            raw[(j, k)] = c;
            raw[(k, j)] = c;
        }
    }
    let (matrix, projection) = project_to_correlation(&raw);
    Ok(Reconstruction {
        grid: grid.to_vec(),
        matrix,
        projection,
    })
}

/// Unsmoothed latent correlation: elementwise inverse bridge of the
/// supported taus, zero for unsupported pairs, then projected.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseCorrelation {
    pub reconstruction: Reconstruction,
    pub clamped: usize,
    pub unsupported: usize,
}

pub fn pointwise_latent_correlation(tau: &TauMatrix, cutoffs: &CutoffSet) -> Result<PointwiseCorrelation> {
    if tau.len() != cutoffs.len() {
        return Err(FsgcError::GridMismatch {
            expected: cutoffs.len(),
            actual: tau.len(),
        });
    }
    let m = tau.len();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|j| (j + 1..m).map(move |k| (j, k))).collect();
    let entries: Vec<Option<(f64, bool)>> = pairs
        .par_iter()
        .map(|&(j, k)| {
            if !tau.is_supported(j, k) {
                return Ok(None);
            }
            let Some(ctx) = cutoffs.bridge_context(j, k) else {
                return Ok(None);
            };
            let inv = bridge::bridge_inverse(tau.tau[(j, k)], &ctx)?;
            Ok(Some((inv.r, inv.clamped)))
        })
        .collect::<Result<_>>()?;
    let mut raw = DMatrix::identity(m, m);
    let (mut clamped, mut unsupported) = (0, 0);
    for (&(j, k), e) in pairs.iter().zip(&entries) {
        match e {
            Some((r, c)) => {
                raw[(j, k)] = *r;
                raw[(k, j)] = *r;
                clamped += usize::from(*c);
            }
            None => unsupported += 1,
        }
    }
    let (matrix, projection) = project_to_correlation(&raw);
    Ok(PointwiseCorrelation {
        reconstruction: Reconstruction {
            grid: tau.grid.clone(),
            matrix,
            projection,
        },
        clamped,
        unsupported,
    })
}
