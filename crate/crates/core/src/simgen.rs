//! Simulation of latent Gaussian processes and the four observation
//! scenarios, in dense and sparse designs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{FsgcError, Result};
use crate::marginal::VariableKind;
use crate::quad;
use crate::rank::ObservationSet;

/// Covariance kernel of the latent process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "lowercase")]
pub enum KernelSpec {
    Matern { variance: f64, smoothness: f64, range: f64 },
    Nonstationary,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Matern {
            variance: 1.0,
            smoothness: 3.5,
            range: 1.0 / 7.0,
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if let KernelSpec::Matern {
            variance,
            smoothness,
            range,
        } = *self
        {
            if !(variance > 0.0 && smoothness > 0.0 && range > 0.0) {
                return Err(FsgcError::InvalidInput(format!("invalid Matérn parameters {self:?}")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Matern { .. } => "matern",
            KernelSpec::Nonstationary => "nonstationary",
        }
    }
}

/// Modified Bessel function of the second kind, `K_ν(x)` for `x > 0`, from
/// `∫₀^∞ exp(−x cosh u) cosh(νu) du`. Returned as `eˣ K_ν(x)` to keep range.
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    let f = |u: f64| (-x * (u.cosh() - 1.0) + nu * u).exp() * 0.5 * (1.0 + (-2.0 * nu * u).exp());
    // Past `upper` the integrand is below e^{-60} times its peak.
    let peak_log = {
        let mut best = 0.0f64;
        let mut u = 0.0f64;
        while u < 60.0 {
            best = best.max(-x * (u.cosh() - 1.0) + nu * u);
            u += 0.05;
        }
        best
    };
    let mut upper = 1.0f64;
    while -x * (upper.cosh() - 1.0) + nu * upper > peak_log - 60.0 {
        upper += 0.5;
    }
    let rough = quad::integrate(f, 0.0, upper, 1e-6 * peak_log.exp(), 200).value;
    quad::integrate(f, 0.0, upper, 1e-14 * rough, 2000).value
}

/// Kernel value at `(s, t)`.
pub fn kernel_eval(spec: &KernelSpec, s: f64, t: f64) -> f64 {
    match *spec {
        KernelSpec::Matern {
            variance,
            smoothness: nu,
            range,
        } => {
            let d = (s - t).abs();
            let x = (2.0 * nu).sqrt() * d / range;
            if x < 1e-8 {
                return variance;
            }
            // x^ν K_ν(x) e^{-x} e^{x}, combined in logs.
            let log = (1.0 - nu) * 2f64.ln() - gamma(nu).ln() + nu * x.ln() + bessel_k_scaled(nu, x).ln() - x;
            variance * log.exp()
        }
        KernelSpec::Nonstationary => {
            let raw = |a: f64, b: f64| {
                let nugget = if a == b { 0.01f64.powi(2) } else { 0.0 };
                0.05f64.powi(2) * 2.0 * (PI * a).sin() * (PI * b).sin()
                    + 0.09f64.powi(2) * 2.0 * (PI * a).cos() * (PI * b).cos()
                    + nugget
            };
            raw(s, t) / (raw(s, s).sqrt() * raw(t, t).sqrt())
        }
    }
}

/// Kernel matrix on a grid.
pub fn kernel_matrix(spec: &KernelSpec, grid: &[f64]) -> DMatrix<f64> {
    let m = grid.len();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = kernel_eval(spec, grid[i], grid[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `m` equally spaced points on `[0, 1]`.
pub fn uniform_grid(m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..m).map(|j| j as f64 / (m - 1) as f64).collect(),
    }
}

/// Symmetric square root factor `L` with `L Lᵀ = K`: Cholesky, with a
/// `1e−10` nugget if needed, or the clipped eigen square root.
fn factor(k: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = k.clone().cholesky() {
        return ch.l();
    }
    let mut nugget = k.clone();
    for i in 0..nugget.nrows() {
        nugget[(i, i)] += 1e-10;
    }
    if let Some(ch) = nugget.cholesky() {
        return ch.l();
    }
    let eig = SymmetricEigen::new(k.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// `n` independent zero-mean rows with the kernel covariance on `grid`. Row
/// `i` draws from stream `i` of a generator seeded with `seed`.
pub fn sample_latent(spec: &KernelSpec, grid: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let l = factor(&kernel_matrix(spec, grid));
    let m = grid.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
            (&l * z).iter().copied().collect()
        })
        .collect()
}

/// Observation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Binary with cutoff 2.5.
    A,
    /// Four ordinal levels with cutoffs −0.6, 0.1, 0.6.
    B,
    /// Truncated at 0.5.
    C,
    /// Continuous cube.
    D,
}

pub const SCENARIO_A_CUTOFF: f64 = 2.5;
pub const SCENARIO_B_CUTOFFS: [f64; 3] = [-0.6, 0.1, 0.6];
pub const SCENARIO_C_CUTOFF: f64 = 0.5;

impl Scenario {
    pub fn kind(self) -> VariableKind {
        match self {
            Scenario::A => VariableKind::Binary,
            Scenario::B => VariableKind::Ordinal { levels: 4 },
            Scenario::C => VariableKind::Truncated,
            Scenario::D => VariableKind::Continuous,
        }
    }

    /// Latent cutoffs shared by every time point.
    pub fn true_cutoffs(self) -> Vec<f64> {
        match self {
            Scenario::A => vec![SCENARIO_A_CUTOFF],
            Scenario::B => SCENARIO_B_CUTOFFS.to_vec(),
            Scenario::C => vec![SCENARIO_C_CUTOFF],
            Scenario::D => Vec::new(),
        }
    }

    /// Observed value generated from a latent value.
    pub fn observe(self, v: f64) -> f64 {
        match self {
            Scenario::A => f64::from(u8::from(v >= SCENARIO_A_CUTOFF)),
            Scenario::B => SCENARIO_B_CUTOFFS.iter().filter(|&&c| v >= c).count() as f64,
            Scenario::C => {
                if v >= SCENARIO_C_CUTOFF {
                    v
                } else {
                    0.0
                }
            }
            Scenario::D => v.powi(3),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Scenario::A),
            "B" => Ok(Scenario::B),
            "C" => Ok(Scenario::C),
            "D" => Ok(Scenario::D),
            _ => Err(FsgcError::InvalidInput(format!("unknown scenario {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub m: usize,
    pub sparse_fraction: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m < 4 || !(self.sparse_fraction > 0.0 && self.sparse_fraction <= 1.0) {
            return Err(FsgcError::InvalidInput(format!("invalid scenario specification {self:?}")));
        }
        Ok(())
    }

    pub fn is_dense(&self) -> bool {
        self.sparse_fraction >= 1.0
    }

    /// Grid points each subject keeps.
    pub fn points_per_subject(&self) -> usize {
        ((self.sparse_fraction * self.m as f64).round() as usize).clamp(1, self.m)
    }
}

const MASK_STREAM_OFFSET: u64 = 1 << 40;

/// Retained grid indices for each subject, sorted.
pub fn sparse_masks(spec: &ScenarioSpec) -> Vec<Vec<usize>> {
    let keep = spec.points_per_subject();
    (0..spec.n)
        .map(|i| {
            if keep == spec.m {
                return (0..spec.m).collect();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(MASK_STREAM_OFFSET + i as u64);
            let mut idx = index::sample(&mut rng, spec.m, keep).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Applies the scenario map elementwise and the sparse mask.
pub fn apply_scenario(latent: &[Vec<f64>], spec: &ScenarioSpec) -> Result<ObservationSet> {
    spec.validate()?;
    if latent.len() != spec.n {
        return Err(FsgcError::DimensionMismatch {
            left: spec.n,
            right: latent.len(),
        });
    }
    if let Some(row) = latent.iter().find(|r| r.len() != spec.m) {
        return Err(FsgcError::GridMismatch {
            expected: spec.m,
            actual: row.len(),
        });
    }
    if latent.iter().flatten().any(|v| !v.is_finite()) {
        return Err(FsgcError::InvalidInput("latent values must be finite".into()));
    }
    let masks = sparse_masks(spec);
    let cells = latent
        .iter()
        .zip(&masks)
        .map(|(row, mask)| {
            let mut out = vec![None; spec.m];
            for &j in mask {
                out[j] = Some(spec.scenario.observe(row[j]));
            }
            out
        })
        .collect();
    ObservationSet::from_cells(spec.scenario.kind(), uniform_grid(spec.m), cells)
}
