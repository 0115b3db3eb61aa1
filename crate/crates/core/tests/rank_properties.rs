use fsgc::marginal::VariableKind;
use fsgc::rank::{kendall_dense, kendall_sparse, ObservationSet};
use fsgc::simgen::uniform_grid;
use proptest::prelude::*;

/// Direct tau-a over all subject pairs.
fn tau_double_loop(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut sum = 0.0;
    for i in 0..n {
        for k in i + 1..n {
            let s = (x[i] - x[k]).signum() * (y[i] - y[k]).signum();
            if x[i] != x[k] && y[i] != y[k] {
                sum += s;
            }
        }
    }
    2.0 * sum / (n * (n - 1)) as f64
}

/// Rows of small integer values, so ties are common.
fn tied_rows(max_n: usize, m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec((0i32..5).prop_map(f64::from), m), 2..=max_n)
}

fn distort(v: f64) -> f64 {
    v.exp() * 3.0 + v.powi(3) - 7.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn matches_double_loop(rows in tied_rows(30, 4)) {
        let grid = uniform_grid(4);
        let t = kendall_dense(&rows, &grid).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                if j == k {
                    continue;
                }
                let x: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                let y: Vec<f64> = rows.iter().map(|r| r[k]).collect();
                prop_assert_eq!(t.tau[(j, k)], tau_double_loop(&x, &y));
            }
        }
    }

    #[test]
    fn monotone_maps_leave_tau_unchanged(rows in tied_rows(40, 5), col in 0usize..5) {
        let grid = uniform_grid(5);
        let mapped: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, &v)| if j == col { distort(v) } else { v }).collect())
            .collect();
        prop_assert!(kendall_dense(&rows, &grid).unwrap().identical(&kendall_dense(&mapped, &grid).unwrap()));
    }

    #[test]
    fn symmetric_bounded_and_order_free(rows in tied_rows(40, 5), shift in 0usize..40) {
        let grid = uniform_grid(5);
        let t = kendall_dense(&rows, &grid).unwrap();
        for j in 0..5 {
            for k in 0..5 {
                if j != k {
                    prop_assert_eq!(t.tau[(j, k)], t.tau[(k, j)]);
                    prop_assert!((-1.0..=1.0).contains(&t.tau[(j, k)]));
                }
            }
        }
        let mut permuted = rows.clone();
        permuted.rotate_left(shift % rows.len());
        permuted.reverse();
        prop_assert!(t.identical(&kendall_dense(&permuted, &grid).unwrap()));
    }

    #[test]
    fn sparse_estimator_on_complete_data_is_dense(rows in tied_rows(30, 4), c0 in 2u64..20) {
        let grid = uniform_grid(4);
        let n = rows.len() as u64;
        prop_assume!(c0 < n * (n - 1) / 2);
        let dense = kendall_dense(&rows, &grid).unwrap();
        let obs = ObservationSet::from_dense(VariableKind::Continuous, grid.clone(), &rows).unwrap();
        let sparse = kendall_sparse(&obs, c0).unwrap();
        let bits = |t: &fsgc::rank::TauMatrix| t.tau.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&dense), bits(&sparse));
        prop_assert_eq!(dense.support, sparse.support);
    }
}
