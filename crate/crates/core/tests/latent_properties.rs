use fsgc::fit::{fit_latent_correlation, reconstruct_correlation, FitConfig, LatentCorrelationModel};
use fsgc::latent::{
    eigendecompose, latent_distance, latent_scores, latent_trajectories, latent_trajectory, predict_curve,
    trapezoid_weights, Retain,
};
use fsgc::marginal::{CutoffSet, MarginalTransform, Marginals, VariableKind};
use fsgc::normal;
use fsgc::rank::{kendall_dense, ObservationSet};
use fsgc::simgen::{apply_scenario, kernel_matrix, sample_latent, uniform_grid, KernelSpec, Scenario, ScenarioSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simulated(scenario: Scenario, kernel: KernelSpec, n: usize, m: usize, seed: u64) -> ObservationSet {
    let grid = uniform_grid(m);
    let latent = sample_latent(&kernel, &grid, n, seed);
    let spec = ScenarioSpec {
        scenario,
        n,
        m,
        sparse_fraction: 1.0,
        seed,
    };
    apply_scenario(&latent, &spec).unwrap()
}

fn fitted(data: &ObservationSet, dim: usize) -> (Marginals, LatentCorrelationModel) {
    let marginals = Marginals::estimate(&data.columns(), data.grid(), data.kind()).unwrap();
    let tau = kendall_dense(&data.dense_rows().unwrap(), data.grid()).unwrap();
    let cfg = FitConfig {
        basis_dim: dim,
        ..FitConfig::default()
    };
    let model = fit_latent_correlation(&tau, &marginals.cutoffs, &cfg).unwrap();
    (marginals, model)
}

fn gram(w: &[f64], e: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    (0..w.len()).map(|j| w[j] * e[(j, a)] * e[(j, b)]).sum()
}

#[test]
fn eigenfunctions_are_orthonormal_and_bounded() {
    let grid = uniform_grid(40);
    for kernel in [KernelSpec::default(), KernelSpec::Nonstationary] {
        let c = kernel_matrix(&kernel, &grid);
        let eig = eigendecompose(&c, &grid, Retain::Pve(0.999)).unwrap();
        for a in 0..eig.retained {
            for b in 0..eig.retained {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((gram(&eig.weights, &eig.eigenfunctions, a, b) - expect).abs() < 1e-8);
            }
        }
        let mean_w = eig.weights.iter().sum::<f64>() / grid.len() as f64;
        assert!(eig.retained_eigenvalues().iter().sum::<f64>() <= c.trace() * mean_w + 1e-12);
        assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]) && eig.eigenvalues.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn nonstationary_components_are_sine_and_cosine() {
    let grid = uniform_grid(50);
    let c = kernel_matrix(&KernelSpec::Nonstationary, &grid);
    let eig = eigendecompose(&c, &grid, Retain::Fixed(2)).unwrap();
    let w = trapezoid_weights(&grid).unwrap();
    let unit = |f: &dyn Fn(f64) -> f64| {
        let v: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
        let norm = v.iter().zip(&w).map(|(x, w)| w * x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    let shapes = [
        unit(&|t| (std::f64::consts::PI * t).sin()),
        unit(&|t| (std::f64::consts::PI * t).cos()),
    ];
    let mut matched = Vec::new();
    for k in 0..2 {
        let psi = eig.eigenfunctions.column(k);
        let sims: Vec<f64> = shapes
            .iter()
            .map(|s| (0..grid.len()).map(|j| w[j] * psi[j] * s[j]).sum::<f64>().abs())
            .collect();
        let best = if sims[0] > sims[1] { 0 } else { 1 };
        assert!(sims[best] > 0.9, "component {k}: {sims:?}");
        matched.push(best);
    }
    assert_ne!(matched[0], matched[1]);
}

#[test]
fn fully_observed_subjects_are_reproduced() {
    let data = simulated(Scenario::B, KernelSpec::default(), 300, 20, 3);
    let (marginals, model) = fitted(&data, 5);
    let grid = data.grid().to_vec();
    for i in 0..5 {
        let obs: Vec<(f64, f64)> = data
            .subject_observations(i)
            .into_iter()
            .map(|(j, x)| (grid[j], x))
            .collect();
        let pred = predict_curve(&obs, &model, &marginals, &grid).unwrap();
        for (j, &(_, x)) in obs.iter().enumerate() {
            let expect = marginals.latent_mean(j, x).unwrap().unwrap();
            assert!((pred.latent[j] - expect).abs() < 1e-8, "ridged {} err {}", pred.ridged, pred.latent[j] - expect);
            assert!(pred.covariance[(j, j)].abs() < 1e-8);
            assert_eq!(pred.observed[j], Some(x));
        }
    }
}

#[test]
fn zero_cross_correlation_leaves_prior_covariance() {
    let grid = uniform_grid(10);
    let data = simulated(Scenario::B, KernelSpec::default(), 100, 10, 1);
    let (marginals, mut model) = fitted(&data, 4);
    model.coefficients = fsgc::basis::CoefficientMatrix::zeros(4);
    let pred = predict_curve(&[(0.0, 2.0)], &model, &marginals, &grid[3..6]).unwrap();
    assert!(pred.latent.iter().all(|v| v.abs() < 1e-12));
    assert!((pred.covariance.clone() - DMatrix::identity(3, 3)).amax() < 1e-12);
}

#[test]
fn scores_ignore_monotone_distortion() {
    for (scenario, map) in [
        (Scenario::D, (|x: f64| x.signum() * x.abs().powf(0.3) * 4.0 - 1.0) as fn(f64) -> f64),
        (Scenario::C, |x: f64| if x > 0.0 { x.exp() + x } else { 0.0 }),
    ] {
        let data = simulated(scenario, KernelSpec::default(), 150, 15, 8);
        let rows: Vec<Vec<f64>> = data
            .dense_rows()
            .unwrap()
            .iter()
            .map(|r| r.iter().map(|&x| map(x)).collect())
            .collect();
        let distorted = ObservationSet::from_dense(data.kind(), data.grid().to_vec(), &rows).unwrap();
        let scores = |d: &ObservationSet| {
            let (marginals, model) = fitted(d, 5);
            let rec = reconstruct_correlation(&model, d.grid()).unwrap();
            let eig = eigendecompose(&rec.matrix, d.grid(), Retain::Fixed(3)).unwrap();
            let subjects: Vec<_> = (0..d.n_subjects()).map(|i| d.subject_observations(i)).collect();
            let tr: Vec<Vec<f64>> = latent_trajectories(&subjects, &rec.matrix, &marginals)
                .unwrap()
                .into_iter()
                .map(|t| t.values)
                .collect();
            latent_scores(&tr, &eig).unwrap().scores
        };
        assert_eq!(scores(&data), scores(&distorted), "{scenario:?}");
    }
}

#[test]
fn conditional_covariance_is_psd() {
    let data = simulated(Scenario::B, KernelSpec::default(), 300, 25, 4);
    let (marginals, model) = fitted(&data, 6);
    let grid = data.grid().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for split in 0..100 {
        let i = split % data.n_subjects();
        let obs: Vec<(f64, f64)> = data
            .subject_observations(i)
            .into_iter()
            .filter(|_| rng.random_bool(0.3))
            .map(|(j, x)| (grid[j], x))
            .collect();
        if obs.is_empty() {
            continue;
        }
        let new: Vec<f64> = (0..rng.random_range(1..8)).map(|_| rng.random::<f64>()).collect();
        let pred = predict_curve(&obs, &model, &marginals, &new).unwrap();
        let min = pred.covariance.clone().symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-8, "split {split}: {min}");
    }
}

/// Binary margins with a common cutoff on an `m`-point grid.
fn binary_marginals(m: usize, cut: f64) -> Marginals {
    Marginals {
        cutoffs: CutoffSet {
            kind: VariableKind::Binary,
            grid: uniform_grid(m),
            cutoffs: vec![Some(vec![cut]); m],
            pooled: Some(vec![cut]),
        },
        transform: MarginalTransform { maps: vec![None; m] },
    }
}

/// Gibbs estimate of `E[V | X]` for `V ~ N(0, C)` with binary observations
/// `X_j = 1{V_j > cut}` at the observed indices.
fn gibbs_mean(c: &DMatrix<f64>, cut: f64, obs: &[(usize, f64)], sweeps: usize, seed: u64) -> Vec<f64> {
    let m = c.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conditionals: Vec<(DVector<f64>, f64)> = (0..m)
        .map(|j| {
            let others: Vec<usize> = (0..m).filter(|&k| k != j).collect();
            let c_oo = DMatrix::from_fn(m - 1, m - 1, |a, b| c[(others[a], others[b])]);
            let c_jo = DVector::from_iterator(m - 1, others.iter().map(|&k| c[(j, k)]));
            let coef = c_oo.cholesky().unwrap().solve(&c_jo);
            let var = 1.0 - c_jo.dot(&coef);
            (coef, var.sqrt())
        })
        .collect();
    let mut v: Vec<f64> = vec![0.0; m];
    for &(j, x) in obs {
        v[j] = if x > 0.5 { cut + 0.5 } else { cut - 0.5 };
    }
    let burn = sweeps / 10;
    let mut sum = vec![0.0; m];
    for sweep in 0..sweeps + burn {
        for j in 0..m {
            let (coef, sd) = &conditionals[j];
            let mu: f64 = (0..m).filter(|&k| k != j).zip(coef.iter()).map(|(k, a)| a * v[k]).sum();
            let (lo, hi) = match obs.iter().find(|o| o.0 == j) {
                Some(&(_, x)) if x > 0.5 => (normal::cdf((cut - mu) / sd), 1.0),
                Some(_) => (0.0, normal::cdf((cut - mu) / sd)),
                None => (0.0, 1.0),
            };
            let u: f64 = rng.random_range(0.0..1.0);
            let p = (lo + u * (hi - lo)).clamp(1e-300, 1.0 - 1e-16);
            v[j] = mu + sd * normal::quantile(p);
        }
        if sweep >= burn {
            for j in 0..m {
                sum[j] += v[j];
            }
        }
    }
    sum.into_iter().map(|s| s / sweeps as f64).collect()
}

#[test]
fn trajectories_agree_with_gibbs_oracle() {
    let cut = 0.3;
    // One observed point: the composed mean is exact.
    let strong = DMatrix::from_row_slice(3, 3, &[1.0, 0.8, 0.6, 0.8, 1.0, 0.8, 0.6, 0.8, 1.0]);
    // Several observed points: exact only up to cross-correlation.
    let weak = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.1f64.powi((i as i32 - j as i32).abs()) });
    let cases: [(&DMatrix<f64>, Vec<(usize, f64)>); 4] = [
        (&strong, vec![(0, 1.0)]),
        (&strong, vec![(2, 0.0)]),
        (&weak, vec![(0, 1.0), (2, 0.0)]),
        (&weak, vec![(0, 1.0), (1, 1.0), (3, 0.0)]),
    ];
    for (case, (c, obs)) in cases.iter().enumerate() {
        let marginals = binary_marginals(c.nrows(), cut);
        let approx = latent_trajectory(obs, c, &marginals).unwrap().values;
        let oracle = gibbs_mean(c, cut, obs, 5000, 100 + case as u64);
        for (a, o) in approx.iter().zip(&oracle) {
            assert!((a - o).abs() < 0.05, "case {case}: {approx:?} vs {oracle:?}");
        }
    }
}

proptest! {
    #[test]
    fn distances_obey_the_triangle_inequality(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        c in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let ab = latent_distance(&a, &b).unwrap();
        let bc = latent_distance(&b, &c).unwrap();
        let ac = latent_distance(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert!(ab >= 0.0);
    }
}
