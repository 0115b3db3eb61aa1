//! Replicated simulation runs: simulate, estimate, compare against the naive
//! baseline, and summarize. Per-replication rows go to CSV, summaries to JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FsgcError, Result};
use crate::evaluate::{self, ZeroVariance};
use crate::fit::{self, FitConfig, InitMode};
use crate::latent::{self, EigenSystem, Retain};
use crate::marginal::Marginals;
use crate::rank::{self, ObservationSet, TauMatrix};
use crate::simgen::{self, KernelSpec, Scenario, ScenarioSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelName {
    Matern,
    Nonstationary,
}

/// Flat run configuration; every field has a default except the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub kernel: KernelName,
    pub matern_variance: f64,
    pub matern_smoothness: f64,
    pub matern_range: f64,
    pub n: usize,
    pub m: usize,
    pub sparse_fraction: f64,
    pub replications: usize,
    pub seed: Option<u64>,
    pub basis_dim: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub max_halvings: usize,
    pub c0: u64,
    pub init: InitMode,
    pub pve: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        RunConfig {
            scenario: Scenario::A,
            kernel: KernelName::Matern,
            matern_variance: 1.0,
            matern_smoothness: 3.5,
            matern_range: 1.0 / 7.0,
            n: 500,
            m: 50,
            sparse_fraction: 1.0,
            replications: 20,
            seed: None,
            basis_dim: fit.basis_dim,
            max_iterations: fit.max_iterations,
            gradient_tolerance: fit.gradient_tolerance,
            max_halvings: fit.max_halvings,
            c0: fit.c0,
            init: fit.init,
            pve: 0.99,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn kernel_spec(&self) -> KernelSpec {
        match self.kernel {
            KernelName::Matern => KernelSpec::Matern {
                variance: self.matern_variance,
                smoothness: self.matern_smoothness,
                range: self.matern_range,
            },
            KernelName::Nonstationary => KernelSpec::Nonstationary,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            basis_dim: self.basis_dim,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            max_halvings: self.max_halvings,
            c0: self.c0,
            init: self.init,
        }
    }

    pub fn scenario_spec(&self, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            scenario: self.scenario,
            n: self.n,
            m: self.m,
            sparse_fraction: self.sparse_fraction,
            seed,
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| FsgcError::InvalidInput("a seed is required for simulation".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.require_seed()?;
        self.kernel_spec().validate()?;
        self.fit_config().validate()?;
        self.scenario_spec(0).validate()?;
        if self.replications == 0 {
            return Err(FsgcError::InvalidInput("replication count must be positive".into()));
        }
        if !(self.pve > 0.0 && self.pve <= 1.0) {
            return Err(FsgcError::InvalidInput(format!("pve {} outside (0, 1]", self.pve)));
        }
        Ok(())
    }
}

/// Seed of replication `rep`, independent of scheduling.
pub fn replication_seed(master: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep as u64);
    rng.next_u64()
}

/// Metric columns, in CSV order.
pub const METRICS: [&str; 18] = [
    "ise_fsgc",
    "ise_fsgc_latent",
    "ise_naive",
    "score_corr_1",
    "score_corr_2",
    "latent_score_corr_1",
    "latent_score_corr_2",
    "acc",
    "acc_latent",
    "components",
    "fit_objective",
    "fit_iterations",
    "fit_converged",
    "projection_distance",
    "unusable_time_points",
    "init_clamped",
    "zero_variance_columns",
    "seconds",
];

/// Metrics that legitimately differ between identical runs.
pub const TIMING_METRICS: [&str; 1] = ["seconds"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub error: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

impl ReplicationRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: RunConfig,
    pub succeeded: usize,
    pub failed: usize,
    /// Mean and sample standard deviation of each metric over successful
    /// replications with a finite value.
    pub aggregate: BTreeMap<String, Summary>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub replications: Vec<ReplicationRecord>,
}

impl EvaluationReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregate.get(metric).and_then(|s| s.mean)
    }

    /// Copy with timing metrics removed, for determinism comparisons.
    pub fn without_timings(&self) -> EvaluationReport {
        let mut out = self.clone();
        for name in TIMING_METRICS {
            out.aggregate.remove(name);
            for r in &mut out.replications {
                r.metrics.remove(name);
            }
        }
        out
    }
}

/// Summaries over replication rows, in row order.
pub fn aggregate(records: &[ReplicationRecord]) -> BTreeMap<String, Summary> {
    METRICS
        .iter()
        .map(|&name| {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.succeeded())
                .filter_map(|r| r.metric(name))
                .filter(|v| v.is_finite())
                .collect();
            let count = values.len();
            let mean = (count > 0).then(|| values.iter().sum::<f64>() / count as f64);
            let sd = mean.map(|mu| {
                if count < 2 {
                    0.0
                } else {
                    (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
                }
            });
            (name.to_string(), Summary { mean, sd, count })
        })
        .collect()
}

/// Everything one replication produces beyond its metrics.
pub struct ReplicationOutput {
    pub latent: Vec<Vec<f64>>,
    pub observations: ObservationSet,
    pub true_correlation: DMatrix<f64>,
    pub fsgc: DMatrix<f64>,
    pub fsgc_latent: DMatrix<f64>,
    pub metrics: BTreeMap<String, f64>,
}

fn first_scores(trajectories: &[Vec<f64>], eig: &EigenSystem) -> Result<DMatrix<f64>> {
    Ok(latent::latent_scores(trajectories, eig)?.scores)
}

fn score_correlations(est: &DMatrix<f64>, truth: &DMatrix<f64>, metrics: &mut BTreeMap<String, f64>, prefix: &str) {
    for k in 0..est.ncols().min(truth.ncols()).min(2) {
        let a: Vec<f64> = est.column(k).iter().copied().collect();
        let b: Vec<f64> = truth.column(k).iter().copied().collect();
        metrics.insert(format!("{prefix}{}", k + 1), evaluate::correlation(&a, &b).abs());
    }
}

/// Predicted observed-scale curves and the accuracy at held-out points.
fn held_out_accuracy(
    trajectories: &[Vec<f64>],
    marginals: &Marginals,
    latent: &[Vec<f64>],
    data: &ObservationSet,
    scenario: Scenario,
) -> Result<f64> {
    let truth: Vec<Vec<f64>> = latent
        .iter()
        .map(|row| row.iter().map(|&v| scenario.observe(v)).collect())
        .collect();
    let predicted: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|tr| {
            tr.iter()
                .enumerate()
                .map(|(j, &v)| marginals.observed_value(j, v).unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    let masks: Vec<Vec<bool>> = data
        .cells()
        .iter()
        .map(|row| row.iter().map(|c| c.is_some()).collect())
        .collect();
    evaluate::accuracy(&truth, &predicted, &masks)
}

/// One full replication with the given seed.
pub fn run_replication(cfg: &RunConfig, seed: u64) -> Result<ReplicationOutput> {
    let grid = simgen::uniform_grid(cfg.m);
    let kernel = cfg.kernel_spec();
    let spec = cfg.scenario_spec(seed);
    let latent = simgen::sample_latent(&kernel, &grid, cfg.n, seed);
    let data = simgen::apply_scenario(&latent, &spec)?;
    let true_correlation = simgen::kernel_matrix(&kernel, &grid);

    let columns = data.columns();
    let marginals = Marginals::estimate(&columns, &grid, data.kind())?;
    let tau: TauMatrix = match data.dense_rows() {
        Some(rows) => rank::kendall_dense(&rows, &grid)?,
        None => rank::kendall_sparse(&data, cfg.c0)?,
    };
    let fit_cfg = cfg.fit_config();
    let model = fit::fit_latent_correlation(&tau, &marginals.cutoffs, &fit_cfg)?;
    let fsgc = fit::reconstruct_correlation(&model, &grid)?;
    let pointwise = fit::pointwise_latent_correlation(&tau, &marginals.cutoffs)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("ise_fsgc".into(), evaluate::ise(&true_correlation, &fsgc.matrix, &grid)?);
    metrics.insert(
        "ise_fsgc_latent".into(),
        evaluate::ise(&true_correlation, &pointwise.reconstruction.matrix, &grid)?,
    );
    if data.is_complete() {
        let (naive, zero) = evaluate::pearson_correlation(&data.dense_rows().expect("complete"), ZeroVariance::Uncorrelated)?;
        metrics.insert("ise_naive".into(), evaluate::ise(&true_correlation, &naive, &grid)?);
        metrics.insert("zero_variance_columns".into(), zero.len() as f64);
    }

    let subjects: Vec<Vec<(usize, f64)>> = (0..data.n_subjects()).map(|i| data.subject_observations(i)).collect();
    let trajectories: Vec<Vec<f64>> = latent::latent_trajectories(&subjects, &fsgc.matrix, &marginals)?
        .into_iter()
        .map(|t| t.values)
        .collect();
    let latent_trajectories: Vec<Vec<f64>> =
        latent::latent_trajectories(&subjects, &pointwise.reconstruction.matrix, &marginals)?
            .into_iter()
            .map(|t| t.values)
            .collect();

    let eig_true = latent::eigendecompose(&true_correlation, &grid, Retain::Fixed(2))?;
    let true_scores = first_scores(&latent, &eig_true)?;
    let eig_fsgc = latent::eigendecompose(&fsgc.matrix, &grid, Retain::Fixed(2))?;
    score_correlations(&first_scores(&trajectories, &eig_fsgc)?, &true_scores, &mut metrics, "score_corr_");
    let eig_latent = latent::eigendecompose(&pointwise.reconstruction.matrix, &grid, Retain::Fixed(2))?;
    score_correlations(
        &first_scores(&latent_trajectories, &eig_latent)?,
        &true_scores,
        &mut metrics,
        "latent_score_corr_",
    );
    let components = latent::eigendecompose(&fsgc.matrix, &grid, Retain::Pve(cfg.pve))?.retained;
    metrics.insert("components".into(), components as f64);

    if !data.is_complete() && data.kind().is_discrete() {
        metrics.insert(
            "acc".into(),
            held_out_accuracy(&trajectories, &marginals, &latent, &data, cfg.scenario)?,
        );
        metrics.insert(
            "acc_latent".into(),
            held_out_accuracy(&latent_trajectories, &marginals, &latent, &data, cfg.scenario)?,
        );
    }

    let d = &model.diagnostics;
    metrics.insert("fit_objective".into(), d.objective);
    metrics.insert("fit_iterations".into(), d.iterations as f64);
    metrics.insert("fit_converged".into(), f64::from(u8::from(d.converged)));
    metrics.insert("projection_distance".into(), fsgc.projection.distance);
    metrics.insert("unusable_time_points".into(), d.unusable_time_points as f64);
    metrics.insert("init_clamped".into(), d.init_clamped as f64);

    Ok(ReplicationOutput {
        latent,
        observations: data,
        true_correlation,
        fsgc: fsgc.matrix,
        fsgc_latent: pointwise.reconstruction.matrix,
        metrics,
    })
}

/// Runs every replication in parallel. Failures are recorded per row.
pub fn run_experiment(cfg: &RunConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let master = cfg.require_seed()?;
    let replications: Vec<ReplicationRecord> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let seed = replication_seed(master, rep);
            let start = Instant::now();
            match run_replication(cfg, seed) {
                Ok(out) => {
                    let mut metrics = out.metrics;
                    metrics.insert("seconds".into(), start.elapsed().as_secs_f64());
                    ReplicationRecord {
                        replication: rep,
                        seed,
                        error: None,
                        metrics,
                    }
                }
                Err(e) => ReplicationRecord {
                    replication: rep,
                    seed,
                    error: Some(e.to_string()),
                    metrics: BTreeMap::new(),
                },
            }
        })
        .collect();
    let succeeded = replications.iter().filter(|r| r.succeeded()).count();
    Ok(EvaluationReport {
        config: cfg.clone(),
        succeeded,
        failed: replications.len() - succeeded,
        aggregate: aggregate(&replications),
        notes: vec![
            "ISE compares unit-diagonal correlation matrices over the full grid square".into(),
            "ise_naive treats zero-variance time points as uncorrelated".into(),
        ],
        replications,
    })
}

pub const REPLICATIONS_FILE: &str = "replications.csv";
pub const REPORT_FILE: &str = "report.json";

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

/// Writes `replications.csv` and `report.json` into `dir`.
pub fn write_report(dir: &Path, report: &EvaluationReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(REPLICATIONS_FILE))?;
    let mut header = vec!["replication".to_string(), "seed".into(), "error".into()];
    header.extend(METRICS.iter().map(|m| m.to_string()));
    w.write_record(&header)?;
    for r in &report.replications {
        let mut row = vec![r.replication.to_string(), r.seed.to_string(), r.error.clone().unwrap_or_default()];
        row.extend(METRICS.iter().map(|m| r.metric(m).map(format_value).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Reads replication rows back from `replications.csv`.
pub fn read_replications(dir: &Path) -> Result<Vec<ReplicationRecord>> {
    let mut r = csv::Reader::from_path(dir.join(REPLICATIONS_FILE))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let bad = |s: &str| FsgcError::InvalidInput(format!("malformed replication field {s:?}"));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut metrics = BTreeMap::new();
        for (name, field) in header.iter().zip(rec.iter()).skip(3) {
            if !field.is_empty() {
                metrics.insert(name.clone(), field.parse::<f64>().map_err(|_| bad(field))?);
            }
        }
        let error = rec.get(2).filter(|e| !e.is_empty()).map(String::from);
        out.push(ReplicationRecord {
            replication: rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("replication"))?,
            seed: rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("seed"))?,
            error,
            metrics,
        });
    }
    Ok(out)
}

/// Recomputes the aggregate from the CSV rows and lists every disagreement
/// with the stored report.
pub fn verify_report(dir: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(dir.join(REPORT_FILE))?;
    let report: EvaluationReport = serde_json::from_str(&text)?;
    let rows = read_replications(dir)?;
    let recomputed = aggregate(&rows);
    let mut problems = Vec::new();
    for (name, summary) in &recomputed {
        match report.aggregate.get(name) {
            Some(stored) if stored == summary => {}
            Some(stored) => problems.push(format!("{name}: stored {stored:?}, recomputed {summary:?}")),
            None => problems.push(format!("{name}: missing from report")),
        }
    }
    for name in report.aggregate.keys() {
        if !recomputed.contains_key(name) {
            problems.push(format!("{name}: not derivable from replication rows"));
        }
    }
    let ok = rows.iter().filter(|r| r.succeeded()).count();
    if ok != report.succeeded || rows.len() - ok != report.failed {
        problems.push(format!(
            "replication counts: stored {}/{}, rows {}/{}",
            report.succeeded,
            report.failed,
            ok,
            rows.len() - ok
        ));
    }
    Ok(problems)
}
