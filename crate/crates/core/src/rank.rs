//! Observation container and sample Kendall's tau matrices for dense and
//! sparsely observed designs.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{FsgcError, Result};
use crate::marginal::VariableKind;

/// One long-format observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub subject_id: String,
    pub time: f64,
    pub value: f64,
}

/// Mixed-type functional observations on the union grid of observed times.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    kind: VariableKind,
    subjects: Vec<String>,
    grid: Vec<f64>,
    /// `cells[i][j]`: value of subject `i` at grid index `j`, if observed.
    cells: Vec<Vec<Option<f64>>>,
}

impl ObservationSet {
    /// Builds the set from long-format records. Subjects keep first-seen order.
    pub fn from_records(kind: VariableKind, records: &[Record]) -> Result<Self> {
        kind.validate()?;
        for r in records {
            if !(0.0..=1.0).contains(&r.time) {
                return Err(FsgcError::OutOfDomain(format!(
                    "time {} of subject {} outside [0, 1]",
                    r.time, r.subject_id
                )));
            }
            if !kind.conforms(r.value) {
                return Err(FsgcError::InvalidInput(format!(
                    "value {} of subject {} does not conform to {} kind",
                    r.value,
                    r.subject_id,
                    kind.name()
                )));
            }
        }
        let mut grid: Vec<f64> = records.iter().map(|r| r.time).collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut subjects = Vec::new();
        for r in records {
            if !index.contains_key(r.subject_id.as_str()) {
                index.insert(&r.subject_id, subjects.len());
                subjects.push(r.subject_id.clone());
            }
        }
        let mut cells = vec![vec![None; grid.len()]; subjects.len()];
        for r in records {
            let i = index[r.subject_id.as_str()];
            let j = grid.partition_point(|&t| t < r.time);
            if cells[i][j].is_some() {
                return Err(FsgcError::InvalidInput(format!(
                    "subject {} observed twice at time {}",
                    r.subject_id, r.time
                )));
            }
            cells[i][j] = Some(r.value);
        }
        Ok(ObservationSet {
            kind,
            subjects,
            grid,
            cells,
        })
    }

    /// Builds the set from per-subject rows on a common grid; `None` marks a
    /// missing value. Subjects are named by their row index.
    pub fn from_cells(kind: VariableKind, grid: Vec<f64>, cells: Vec<Vec<Option<f64>>>) -> Result<Self> {
        kind.validate()?;
        if grid.windows(2).any(|w| w[0] >= w[1]) || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(FsgcError::InvalidInput(
                "grid must be strictly increasing inside [0, 1]".into(),
            ));
        }
        for row in &cells {
            if row.len() != grid.len() {
                return Err(FsgcError::GridMismatch {
                    expected: grid.len(),
                    actual: row.len(),
                });
            }
            if let Some(v) = row.iter().flatten().find(|v| !kind.conforms(**v)) {
                return Err(FsgcError::InvalidInput(format!(
                    "value {v} does not conform to {} kind",
                    kind.name()
                )));
            }
        }
        let subjects = (0..cells.len()).map(|i| i.to_string()).collect();
        Ok(ObservationSet {
            kind,
            subjects,
            grid,
            cells,
        })
    }

    /// Complete data from an `n × m` matrix of rows.
    pub fn from_dense(kind: VariableKind, grid: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let cells = rows.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
        Self::from_cells(kind, grid, cells)
    }

    pub fn kind(&self) -> VariableKind {
        self.kind
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn cells(&self) -> &[Vec<Option<f64>>] {
        &self.cells
    }

    /// Observed `(grid index, value)` pairs of subject `i`.
    pub fn subject_observations(&self, i: usize) -> Vec<(usize, f64)> {
        self.cells[i]
            .iter()
            .enumerate()
            .filter_map(|(j, v)| v.map(|v| (j, v)))
            .collect()
    }

    /// Observed values at each grid index.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.grid.len())
            .map(|j| self.cells.iter().filter_map(|row| row[j]).collect())
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|row| row.iter().all(|v| v.is_some()))
    }

    /// Rows of a complete set.
    pub fn dense_rows(&self) -> Option<Vec<Vec<f64>>> {
        self.cells
            .iter()
            .map(|row| row.iter().copied().collect::<Option<Vec<f64>>>())
            .collect()
    }

    /// Long-format records in subject-then-time order.
    pub fn records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for (i, row) in self.cells.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    out.push(Record {
                        subject_id: self.subjects[i].clone(),
                        time: self.grid[j],
                        value: *v,
                    });
                }
            }
        }
        out
    }

    /// Index of the grid point nearest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        nearest_index(&self.grid, t)
    }
}

pub(crate) fn nearest_index(grid: &[f64], t: f64) -> usize {
    let p = grid.partition_point(|&g| g < t);
    if p == 0 {
        0
    } else if p == grid.len() || (t - grid[p - 1]) <= (grid[p] - t) {
        p - 1
    } else {
        p
    }
}

/// Sample Kendall's tau over grid pairs with pairwise-complete support.
#[derive(Debug, Clone, PartialEq)]
pub struct TauMatrix {
    pub grid: Vec<f64>,
    /// Symmetric; NaN where a pair has no support. The diagonal is unused.
    pub tau: DMatrix<f64>,
    /// Number of co-observed subject pairs.
    pub support: DMatrix<u64>,
    /// Pairs with support `<= threshold` are unsupported.
    pub threshold: u64,
}

impl TauMatrix {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn is_supported(&self, j: usize, k: usize) -> bool {
        j != k && self.support[(j, k)] > self.threshold && self.tau[(j, k)].is_finite()
    }

    /// Supported pairs `(j, k)` with `j < k`, row-major.
    pub fn supported_pairs(&self) -> Vec<(usize, usize)> {
        let m = self.len();
        (0..m)
            .flat_map(|j| (j + 1..m).map(move |k| (j, k)))
            .filter(|&(j, k)| self.is_supported(j, k))
            .collect()
    }

    /// Bitwise equality of every field, NaN entries included.
    pub fn identical(&self, other: &TauMatrix) -> bool {
        self.threshold == other.threshold
            && self.support == other.support
            && self.grid.iter().map(|t| t.to_bits()).eq(other.grid.iter().map(|t| t.to_bits()))
            && self.tau.shape() == other.tau.shape()
            && self.tau.iter().map(|t| t.to_bits()).eq(other.tau.iter().map(|t| t.to_bits()))
    }
}

/// `Σ_{i<i'} sgn(x_i − x_i') sgn(y_i − y_i')` in O(n log n), ties counting 0.
pub fn concordance_sum(x: &[f64], y: &[f64]) -> i64 {
    let n = x.len();
    debug_assert_eq!(n, y.len());
    if n < 2 {
        return 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();

    let tie_pairs = |run: u64| run * (run - 1) / 2;
    let (mut x_ties, mut joint_ties) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for i in 1..n {
        if xs[i] == xs[i - 1] {
            run_x += 1;
            if ys[i] == ys[i - 1] {
                run_xy += 1;
            } else {
                joint_ties += tie_pairs(run_xy);
                run_xy = 1;
            }
        } else {
            x_ties += tie_pairs(run_x);
            joint_ties += tie_pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    x_ties += tie_pairs(run_x);
    joint_ties += tie_pairs(run_xy);

    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut y_ties = 0u64;
    let mut run_y = 1u64;
    for i in 1..n {
        if ys[i] == ys[i - 1] {
            run_y += 1;
        } else {
            y_ties += tie_pairs(run_y);
            run_y = 1;
        }
    }
    y_ties += tie_pairs(run_y);

    let total = tie_pairs(n as u64);
    total as i64 - x_ties as i64 - y_ties as i64 + joint_ties as i64 - 2 * swaps as i64
}

/// Bottom-up merge sort counting strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid && j < hi {
                if v[j] < v[i] {
                    buf[k] = v[j];
                    swaps += (mid - i) as u64;
                    j += 1;
                } else {
                    buf[k] = v[i];
                    i += 1;
                }
                k += 1;
            }
            buf[k..k + (mid - i)].copy_from_slice(&v[i..mid]);
            k += mid - i;
            buf[k..k + (hi - j)].copy_from_slice(&v[j..hi]);
            lo = hi;
        }
        v.copy_from_slice(buf);
        width *= 2;
    }
    swaps
}

/// Direct O(n²) concordance sum; kept as a reference implementation.
pub fn concordance_sum_naive(x: &[f64], y: &[f64]) -> i64 {
    let mut s = 0i64;
    for i in 0..x.len() {
        for k in i + 1..x.len() {
            let a = (x[i] - x[k]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let b = (y[i] - y[k]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            s += a * b;
        }
    }
    s
}

fn assemble(grid: &[f64], threshold: u64, entries: Vec<((usize, usize), f64, u64)>) -> TauMatrix {
    let m = grid.len();
    let mut tau = DMatrix::from_element(m, m, f64::NAN);
    let mut support = DMatrix::zeros(m, m);
    for ((j, k), t, s) in entries {
        tau[(j, k)] = t;
        tau[(k, j)] = t;
        support[(j, k)] = s;
        support[(k, j)] = s;
    }
    TauMatrix {
        grid: grid.to_vec(),
        tau,
        support,
        threshold,
    }
}

fn upper_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|j| (j + 1..m).map(move |k| (j, k))).collect()
}

/// Kendall's tau for complete `n × m` data (rows are subjects).
pub fn kendall_dense(rows: &[Vec<f64>], grid: &[f64]) -> Result<TauMatrix> {
    let n = rows.len();
    if n < 2 {
        return Err(FsgcError::InsufficientData(format!(
            "Kendall's tau needs at least 2 subjects, got {n}"
        )));
    }
    let m = grid.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != m) {
        return Err(FsgcError::GridMismatch {
            expected: m,
            actual: bad.len(),
        });
    }
    let columns: Vec<Vec<f64>> = (0..m).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    let total = (n as u64) * (n as u64 - 1) / 2;
    let entries = upper_pairs(m)
        .into_par_iter()
        .map(|(j, k)| {
            let s = concordance_sum(&columns[j], &columns[k]);
            ((j, k), s as f64 / total as f64, total)
        })
        .collect();
    Ok(assemble(grid, 0, entries))
}

/// Kendall's tau over co-observed subject pairs. Pairs with support at most
/// `c0` are kept in the matrix but marked unsupported.
pub fn kendall_sparse(data: &ObservationSet, c0: u64) -> Result<TauMatrix> {
    if c0 < 2 {
        return Err(FsgcError::InvalidInput(format!("c0 must be at least 2, got {c0}")));
    }
    let out = pairwise_tau(data, c0);
    if out.supported_pairs().is_empty() {
        return Err(FsgcError::EmptySupport { c0 });
    }
    Ok(out)
}

/// Pairwise-complete tau without the non-empty support check.
pub fn pairwise_tau(data: &ObservationSet, threshold: u64) -> TauMatrix {
    let m = data.grid.len();
    let cells = &data.cells;
    let entries: Vec<_> = upper_pairs(m)
        .into_par_iter()
        .map(|(j, k)| {
            let (x, y): (Vec<f64>, Vec<f64>) = cells
                .iter()
                .filter_map(|row| Some((row[j]?, row[k]?)))
                .unzip();
            let c = x.len() as u64;
            let support = c * c.saturating_sub(1) / 2;
            let tau = if support == 0 {
                f64::NAN
            } else {
                concordance_sum(&x, &y) as f64 / support as f64
            };
            ((j, k), tau, support)
        })
        .collect();
    assemble(&data.grid, threshold, entries)
}
