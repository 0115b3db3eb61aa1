use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fsgc::experiment::{self, KernelName, RunConfig};
use fsgc::fit::{self, InitMode, LatentCorrelationModel};
use fsgc::io;
use fsgc::latent::{self, Retain};
use fsgc::marginal::Marginals;
use fsgc::rank::{self, ObservationSet};
use fsgc::simgen::{self, Scenario};

const OUTPUT_ENV: &str = "FSGC_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "fsgc-out";

#[derive(Parser)]
#[command(name = "fsgc", version, about = "Latent correlation estimation and FPCA for mixed-type functional data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one simulated data set.
    Simulate(RunArgs),
    /// Estimate the latent correlation surface from a data file.
    Fit(FitCommand),
    /// Latent eigenfunctions and subject scores.
    Scores(ScoresCommand),
    /// Predict subject curves at new times.
    Predict(PredictCommand),
    /// Run replicated simulations and write a report.
    Evaluate(RunArgs),
    /// Recompute a report's aggregates from its replication rows.
    VerifyReport {
        /// Directory holding report.json and replications.csv.
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args, Default, Clone)]
struct FitArgs {
    #[arg(long)]
    basis_dim: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    gradient_tolerance: Option<f64>,
    #[arg(long)]
    max_halvings: Option<usize>,
    /// Minimum supported subject pairs per time pair (sparse data).
    #[arg(long)]
    c0: Option<u64>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    InverseBridge,
    Zeros,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Matern,
    Nonstationary,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML file with run configuration keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario A, B, C or D.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    #[arg(long)]
    matern_variance: Option<f64>,
    #[arg(long)]
    matern_smoothness: Option<f64>,
    #[arg(long)]
    matern_range: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Fraction of grid points kept per subject; 1 means dense.
    #[arg(long)]
    sparse_fraction: Option<f64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pve: Option<f64>,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FitCommand {
    /// Long CSV with a `.meta.json` sidecar.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    /// Smoothed surface from the fitted model.
    Functional,
    /// Pointwise inverse-bridged correlation on the data grid.
    Multivariate,
}

#[derive(Args)]
struct ScoresCommand {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "functional")]
    variant: Variant,
    /// Proportion of variance explained used to pick the component count.
    #[arg(long, conflicts_with = "components")]
    pve: Option<f64>,
    /// Fixed component count.
    #[arg(long)]
    components: Option<usize>,
    /// Minimum supported subject pairs per time pair (multivariate, sparse data).
    #[arg(long, default_value_t = 5)]
    c0: u64,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PredictCommand {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated prediction times in [0, 1].
    #[arg(long, value_delimiter = ',', required = true)]
    times: Vec<f64>,
    /// Restrict to one subject.
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

/// Fitted model together with the marginals it was fitted with.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    model: LatentCorrelationModel,
    marginals: Marginals,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    Scenario::parse(s).map_err(|e| e.to_string())
}

fn output_dir(flag: Option<&PathBuf>, config: Option<&PathBuf>) -> PathBuf {
    flag.or(config)
        .cloned()
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

impl FitArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.basis_dim {
            cfg.basis_dim = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.max_iterations = v;
        }
        if let Some(v) = self.gradient_tolerance {
            cfg.gradient_tolerance = v;
        }
        if let Some(v) = self.max_halvings {
            cfg.max_halvings = v;
        }
        if let Some(v) = self.c0 {
            cfg.c0 = v;
        }
        if let Some(v) = self.init {
            cfg.init = match v {
                InitArg::InverseBridge => InitMode::InverseBridge,
                InitArg::Zeros => InitMode::Zeros,
            };
        }
    }
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        set!(scenario, matern_variance, matern_smoothness, matern_range, n, m, sparse_fraction, replications, pve);
        if let Some(k) = self.kernel {
            cfg.kernel = match k {
                KernelArg::Matern => KernelName::Matern,
                KernelArg::Nonstationary => KernelName::Nonstationary,
            };
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        self.fit.apply(&mut cfg);
        cfg.output_dir = Some(output_dir(self.output_dir.as_ref(), cfg.output_dir.as_ref()));
        Ok(cfg)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<ModelFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing model {}", path.display()))
}

fn tau_for(data: &ObservationSet, c0: u64) -> fsgc::Result<rank::TauMatrix> {
    match data.dense_rows() {
        Some(rows) => rank::kendall_dense(&rows, data.grid()),
        None => rank::kendall_sparse(data, c0),
    }
}

fn simulate(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let dir = cfg.output_dir.clone().expect("resolved");
    fs::create_dir_all(&dir)?;
    let grid = simgen::uniform_grid(cfg.m);
    let kernel = cfg.kernel_spec();
    let latent = simgen::sample_latent(&kernel, &grid, cfg.n, seed);
    let data = simgen::apply_scenario(&latent, &cfg.scenario_spec(seed))?;
    io::write_observations(&dir.join("observations.csv"), &data)?;
    io::write_grid_matrix(&dir.join("true_correlation.csv"), &grid, &simgen::kernel_matrix(&kernel, &grid))?;
    println!("wrote {} subjects to {}", data.n_subjects(), dir.display());
    Ok(())
}

fn fit_command(cmd: &FitCommand) -> anyhow::Result<()> {
    let mut cfg = RunConfig::default();
    cmd.fit.apply(&mut cfg);
    let fit_cfg = cfg.fit_config();
    let dir = output_dir(cmd.output_dir.as_ref(), None);
    fs::create_dir_all(&dir)?;
    let data = io::read_observations(&cmd.data, None)?;
    let marginals = Marginals::estimate(&data.columns(), data.grid(), data.kind())?;
    let tau = tau_for(&data, fit_cfg.c0)?;
    let model = fit::fit_latent_correlation(&tau, &marginals.cutoffs, &fit_cfg)?;
    let recon = fit::reconstruct_correlation(&model, data.grid())?;
    io::write_grid_matrix(&dir.join("correlation.csv"), data.grid(), &recon.matrix)?;
    let diagnostics = serde_json::json!({
        "fit": model.diagnostics,
        "projection": recon.projection,
    });
    write_json(&dir.join("diagnostics.json"), &diagnostics)?;
    write_json(&dir.join("model.json"), &ModelFile { model, marginals })?;
    println!("{}", serde_json::to_string_pretty(&diagnostics)?);
    Ok(())
}

/// Observations of each subject mapped to the model's grid.
fn indexed_observations(data: &ObservationSet, grid: &[f64]) -> Vec<Vec<(usize, f64)>> {
    (0..data.n_subjects())
        .map(|i| {
            data.subject_observations(i)
                .into_iter()
                .map(|(j, x)| (nearest(grid, data.grid()[j]), x))
                .collect()
        })
        .collect()
}

fn nearest(grid: &[f64], t: f64) -> usize {
    grid.iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map(|(j, _)| j)
        .unwrap_or(0)
}

fn scores_command(cmd: &ScoresCommand) -> anyhow::Result<()> {
    let retain = match (cmd.pve, cmd.components) {
        (_, Some(k)) => Retain::Fixed(k),
        (Some(p), None) => Retain::Pve(p),
        (None, None) => Retain::Pve(0.99),
    };
    let dir = output_dir(cmd.output_dir.as_ref(), None);
    fs::create_dir_all(&dir)?;
    let file = load_model(&cmd.model)?;
    let data = io::read_observations(&cmd.data, None)?;
    if data.kind() != file.marginals.kind() {
        bail!(
            "data kind {} does not match model kind {}",
            data.kind().name(),
            file.marginals.kind().name()
        );
    }
    let grid = file.marginals.cutoffs.grid.clone();
    let correlation = match cmd.variant {
        Variant::Functional => fit::reconstruct_correlation(&file.model, &grid)?.matrix,
        Variant::Multivariate => {
            if data.grid() != grid.as_slice() {
                bail!("the multivariate variant needs data on the model's grid");
            }
            let tau = tau_for(&data, cmd.c0)?;
            fit::pointwise_latent_correlation(&tau, &file.marginals.cutoffs)?
                .reconstruction
                .matrix
        }
    };
    let eig = latent::eigendecompose(&correlation, &grid, retain)?;
    let subjects = indexed_observations(&data, &grid);
    let trajectories: Vec<Vec<f64>> = latent::latent_trajectories(&subjects, &correlation, &file.marginals)?
        .into_iter()
        .map(|t| t.values)
        .collect();
    let scores = latent::latent_scores(&trajectories, &eig)?;
    io::write_eigenfunctions(&dir.join("eigenfunctions.csv"), &eig)?;
    io::write_scores(&dir.join("scores.csv"), data.subjects(), &scores)?;
    let summary = serde_json::json!({
        "eigenvalues": eig.eigenvalues,
        "retained": eig.retained,
        "explained": eig.explained(),
        "score_variances": scores.variances,
    });
    write_json(&dir.join("eigenvalues.json"), &summary)?;
    println!("retained {} components ({:.4} of variance)", eig.retained, eig.explained());
    Ok(())
}

fn predict_command(cmd: &PredictCommand) -> anyhow::Result<()> {
    let dir = output_dir(cmd.output_dir.as_ref(), None);
    fs::create_dir_all(&dir)?;
    let file = load_model(&cmd.model)?;
    let data = io::read_observations(&cmd.data, None)?;
    let mut w = csv::Writer::from_path(dir.join("predictions.csv"))?;
    w.write_record(["subject_id", "time", "latent", "latent_sd", "observed"])?;
    let mut found = false;
    for (i, id) in data.subjects().iter().enumerate() {
        if cmd.subject.as_ref().is_some_and(|s| s != id) {
            continue;
        }
        found = true;
        let obs: Vec<(f64, f64)> = data
            .subject_observations(i)
            .into_iter()
            .map(|(j, x)| (data.grid()[j], x))
            .collect();
        let pred = latent::predict_curve(&obs, &file.model, &file.marginals, &cmd.times)
            .with_context(|| format!("predicting subject {id}"))?;
        for (q, t) in pred.times.iter().enumerate() {
            let sd = pred.covariance[(q, q)].max(0.0).sqrt();
            let observed = pred.observed[q].map(|v| v.to_string()).unwrap_or_default();
            w.write_record([id.clone(), t.to_string(), pred.latent[q].to_string(), sd.to_string(), observed])?;
        }
    }
    w.flush()?;
    if !found {
        bail!("no matching subject in {}", cmd.data.display());
    }
    println!("wrote {}", dir.join("predictions.csv").display());
    Ok(())
}

fn evaluate_command(args: &RunArgs) -> anyhow::Result<ExitCode> {
    let cfg = args.resolve()?;
    let dir = cfg.output_dir.clone().expect("resolved");
    let report = experiment::run_experiment(&cfg)?;
    experiment::write_report(&dir, &report)?;
    for r in report.replications.iter().filter(|r| !r.succeeded()) {
        eprintln!("replication {} failed: {}", r.replication, r.error.as_deref().unwrap_or(""));
    }
    for (name, s) in &report.aggregate {
        if let (Some(mean), Some(sd)) = (s.mean, s.sd) {
            println!("{name:24} mean {mean:>12.6} sd {sd:>12.6} (n={})", s.count);
        }
    }
    println!("{} succeeded, {} failed; report in {}", report.succeeded, report.failed, dir.display());
    Ok(if report.failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn verify_command(dir: &Path) -> anyhow::Result<ExitCode> {
    let problems = experiment::verify_report(dir)?;
    if problems.is_empty() {
        println!("report consistent with replication rows");
        return Ok(ExitCode::SUCCESS);
    }
    for p in &problems {
        eprintln!("{p}");
    }
    Ok(ExitCode::FAILURE)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Simulate(args) => simulate(args)?,
        Command::Fit(cmd) => fit_command(cmd)?,
        Command::Scores(cmd) => scores_command(cmd)?,
        Command::Predict(cmd) => predict_command(cmd)?,
        Command::Evaluate(args) => return evaluate_command(args),
        Command::VerifyReport { dir } => return verify_command(dir),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
