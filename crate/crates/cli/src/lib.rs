//! Subcommand implementations for the `gridcox` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use gridcox::config::RunConfig;
use gridcox::eval::{crossval, write_score_tables, CrossvalReport};
use gridcox::model::{latent_names, optimize_hyper, write_fit, ModelKind, ModelSpec};
use gridcox::sim::{sample_truth, simulate_session, TruthConfig};
use gridcox::spde::{marginal_variance, marginal_variance_numeric, DomainKind};
use gridcox::trajectory::{integration_weights, load_session, rate_map_kernel, segment_path, Raster};

pub mod manifest;

use manifest::Manifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gridcox::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for invalid input, 3 for convergence failures, 4 for failed checks, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use gridcox::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::CheckFailed(_) => 4,
            CliError::Core(e) => match e {
                E::NotConverged { .. } | E::EvaluationCap { .. } | E::NotPositiveDefinite { .. } => 3,
                E::Io(_) => 1,
                _ => 2,
            },
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gridcox", version, about = "Log-Gaussian Cox process models for spike trains along trajectories")]
pub struct Cli {
    /// Worker threads. Computation is currently sequential; the value is recorded in manifests.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Compare closed-form marginal variances with numerical spectral integrals.
    CheckVariance(CheckVarianceArgs),
    /// Kernel rate maps per unit time, per unit length, and of speed.
    Ratemap(RatemapArgs),
    /// Fit one model by hyperparameter search and Laplace approximation.
    Fit(FitArgs),
    /// Simulate a trajectory and spike train from a ground-truth description.
    Simulate(SimulateArgs),
    /// Two-fold cross-validation with score-difference permutation tests.
    Crossval(CrossvalArgs),
}

#[derive(Debug, Subcommand)]
pub enum ConfigAction {
    /// Print the default configuration as JSON.
    PrintDefaults,
}

#[derive(Debug, Args)]
pub struct CheckVarianceArgs {
    #[arg(long, value_delimiter = ',', default_values_t = ["plane".to_string(), "circle".to_string(), "line".to_string()])]
    pub domains: Vec<String>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-0.9, -0.5, 0.0, 0.5, 1.0, 2.0])]
    pub phi: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 1.0, std::f64::consts::TAU])]
    pub kappa: Vec<f64>,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Optional CSV copy of the table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RatemapArgs {
    #[arg(long)]
    pub session: PathBuf,
    /// Kernel bandwidth (cm).
    #[arg(long, default_value_t = 3.0)]
    pub h: f64,
    #[arg(long, default_value_t = 50)]
    pub nx: usize,
    #[arg(long, default_value_t = 50)]
    pub ny: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub model: ModelKind,
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured search and posterior seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long = "T", default_value_t = 1800.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0.033)]
    pub dt: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Session CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[arg(long)]
    pub session: PathBuf,
    /// Comma-separated model codes; the first is the baseline.
    #[arg(long, value_delimiter = ',', default_values_t = [ModelKind::Omega, ModelKind::OmegaTheta])]
    pub models: Vec<ModelKind>,
    /// Alias for a single-model run.
    #[arg(long, conflicts_with = "models")]
    pub model: Option<ModelKind>,
    /// Interval lengths (s).
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 5.0, 10.0, 20.0, 30.0, 40.0])]
    pub tau: Vec<f64>,
    /// Sign-flip permutations per test.
    #[arg(long = "J")]
    pub permutations: Option<usize>,
    /// Posterior draws for predictive moments.
    #[arg(long = "K")]
    pub draws: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let threads = cli.threads;
    match cli.command {
        Command::Config { action: ConfigAction::PrintDefaults } => {
            let text = serde_json::to_string_pretty(&RunConfig::default())?;
            quiet_pipe(writeln!(std::io::stdout().lock(), "{text}"))
        }
        Command::CheckVariance(a) => cmd_check_variance(&a),
        Command::Ratemap(a) => cmd_ratemap(&a, threads),
        Command::Fit(a) => cmd_fit(&a, threads),
        Command::Simulate(a) => cmd_simulate(&a, threads),
        Command::Crossval(a) => cmd_crossval(&a, threads),
    }
}

/// A closed downstream pipe (`| head`) is not an error.
fn quiet_pipe(r: std::io::Result<()>) -> CliResult<()> {
    match r {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn with_seed(mut cfg: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        cfg.seeds.search = s;
        cfg.seeds.posterior = s;
    }
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceRow {
    pub domain: String,
    pub kappa: f64,
    pub phi: f64,
    pub closed_form: f64,
    pub numeric: f64,
    pub relative_error: f64,
    pub pass: bool,
}

/// Evaluates `closed` against the numerical variance on every grid point.
pub fn variance_table<F>(domains: &[DomainKind], kappas: &[f64], phis: &[f64], tolerance: f64, closed: F) -> CliResult<Vec<VarianceRow>>
where
    F: Fn(DomainKind, f64, f64) -> gridcox::Result<f64>,
{
    let mut rows = Vec::new();
    for &d in domains {
        for &kappa in kappas {
            for &phi in phis {
                let c = closed(d, kappa, phi)?;
                let n = marginal_variance_numeric(d, kappa, phi, 1.0)?;
                let relative_error = (c - n).abs() / n.abs();
                rows.push(VarianceRow {
                    domain: d.name().to_string(),
                    kappa,
                    phi,
                    closed_form: c,
                    numeric: n,
                    relative_error,
                    pass: relative_error <= tolerance,
                });
            }
        }
    }
    Ok(rows)
}

/// Prints the table and fails if any row exceeds the tolerance.
pub fn report_variance_rows(rows: &[VarianceRow], out: Option<&Path>) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in rows {
        if let Err(e) = w.serialize(r) {
            match e.kind() {
                csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::BrokenPipe => break,
                _ => return Err(e.into()),
            }
        }
    }
    quiet_pipe(w.flush())?;
    if let Some(p) = out {
        let mut w = csv::Writer::from_path(p)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(CliError::CheckFailed(format!("{failed} of {} variance rows exceed the tolerance", rows.len())));
    }
    Ok(())
}

fn cmd_check_variance(a: &CheckVarianceArgs) -> CliResult<()> {
    let domains = a.domains.iter().map(|s| s.parse::<DomainKind>()).collect::<gridcox::Result<Vec<_>>>()?;
    if a.tolerance.is_nan() || a.tolerance <= 0.0 {
        return Err(CliError::Usage("--tolerance must be positive".into()));
    }
    let rows = variance_table(&domains, &a.kappa, &a.phi, a.tolerance, |d, k, p| marginal_variance(d, k, p, 1.0))?;
    report_variance_rows(&rows, a.out.as_deref())
}

fn cmd_ratemap(a: &RatemapArgs, threads: usize) -> CliResult<()> {
    let (data, spikes) = load_session(&a.session)?;
    if a.nx == 0 || a.ny == 0 {
        return Err(CliError::Usage("--nx and --ny must be positive".into()));
    }
    let raster = Raster { rect: data.bounding_box(), nx: a.nx, ny: a.ny };
    let map = rate_map_kernel(&data, &spikes, a.h, raster)?;
    std::fs::create_dir_all(&a.out)?;
    raster.write_csv(&map.per_time, &a.out.join("rate_per_time.csv"))?;
    raster.write_csv(&map.per_length, &a.out.join("rate_per_length.csv"))?;
    raster.write_csv(&map.speed, &a.out.join("speed.csv"))?;
    let meta = serde_json::json!({
        "bandwidth_cm": map.bandwidth,
        "raster": raster,
        "samples": data.samples.len(),
        "spikes": spikes.len(),
    });
    std::fs::write(a.out.join("metadata.json"), serde_json::to_string_pretty(&meta)?)?;
    Manifest::new("ratemap", threads)
        .input(&a.session)?
        .param("h", a.h)
        .param("nx", a.nx)
        .param("ny", a.ny)
        .write(&a.out.join("manifest.json"))
}

fn cmd_fit(a: &FitArgs, threads: usize) -> CliResult<()> {
    let cfg = with_seed(load_config(a.config.as_deref())?, a.seed);
    let (data, spikes) = load_session(&a.session)?;
    let meshes = cfg.build_meshes(&data, &[a.model])?;
    let segs = segment_path(
        &data,
        &meshes.tri,
        if a.model.has_theta() { meshes.circ.as_ref() } else { None },
        if a.model.has_time() { meshes.temporal.as_ref() } else { None },
        &[],
    )?;
    let iw = integration_weights(&segs, &meshes, a.model, &data, &spikes, None)?;
    let spec = ModelSpec::new(a.model, cfg.priors.clone(), meshes)?;
    let (fit, report) = optimize_hyper(&spec, &iw, &cfg.search(), None)?;
    write_fit(&a.out, &fit, Some(&report))?;
    spec.meshes.tri.write_csv(&a.out.join("mesh"))?;
    if let Some(t) = &spec.meshes.temporal {
        let mut w = csv::Writer::from_path(a.out.join("temporal_knots.csv"))?;
        w.write_record(["index", "t"])?;
        for (i, k) in t.knots.iter().enumerate() {
            w.write_record([i.to_string(), k.to_string()])?;
        }
        w.flush()?;
    }
    eprintln!(
        "{}: log marginal likelihood {:.4}, {} evaluations, {} spikes",
        a.model, fit.log_marginal_likelihood, report.evaluations, spikes.len()
    );
    Manifest::new("fit", threads)
        .config(&cfg)?
        .input(&a.session)?
        .param("model", a.model.code())
        .write(&a.out.join("manifest.json"))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "session".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_truth(path: Option<&Path>) -> CliResult<TruthConfig> {
    let Some(p) = path else { return Ok(TruthConfig::default()) };
    let text = std::fs::read_to_string(p)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Usage(format!("{}: {}: {}", p.display(), e.path(), e.inner())))
}

fn cmd_simulate(a: &SimulateArgs, threads: usize) -> CliResult<()> {
    let truth_cfg = load_truth(a.truth.as_deref())?;
    if !(a.duration > 0.0 && a.dt > 0.0 && a.dt < a.duration) {
        return Err(CliError::Usage("--T and --dt must be positive with dt < T".into()));
    }
    let truth = sample_truth(&truth_cfg, a.duration)?;
    let (data, spikes) = simulate_session(&truth, &truth_cfg, a.duration, a.dt, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    data.write_csv(&a.out)?;
    let p_field = truth.meshes.field_dim(truth.kind);
    let p_time = truth.meshes.p_time();
    let mut w = csv::Writer::from_path(sibling(&a.out, "truth.csv"))?;
    w.write_record(["index", "name", "value"])?;
    for (i, (name, v)) in latent_names(p_field, p_time).iter().zip(&truth.latent).enumerate() {
        w.write_record([i.to_string(), name.clone(), format!("{v:.17e}")])?;
    }
    w.flush()?;
    eprintln!("{} samples, {} spikes", data.samples.len(), spikes.len());
    let mut m = Manifest::new("simulate", threads);
    if let Some(t) = &a.truth {
        m = m.input(t)?;
    }
    m.param("truth", &truth_cfg)
        .param("T", a.duration)
        .param("dt", a.dt)
        .seed("simulation", a.seed)
        .write(&sibling(&a.out, "manifest.json"))
}

/// Writes per-interval scores for every fold and model.
pub fn write_interval_scores(report: &CrossvalReport, path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["tau", "fold", "interval", "observed", "model", "mean", "variance", "se", "ds"])?;
    for f in &report.folds {
        for m in &f.models {
            for (j, &i) in f.intervals.iter().enumerate() {
                w.write_record([
                    f.tau.to_string(),
                    f.fold.to_string(),
                    i.to_string(),
                    f.observed[j].to_string(),
                    m.model.code().to_string(),
                    m.moments[j].mean.to_string(),
                    m.moments[j].variance.to_string(),
                    m.se[j].to_string(),
                    m.ds[j].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_crossval(a: &CrossvalArgs, threads: usize) -> CliResult<()> {
    let mut cfg = with_seed(load_config(a.config.as_deref())?, a.seed);
    if let Some(j) = a.permutations {
        cfg.inference.permutations = j;
    }
    if let Some(k) = a.draws {
        cfg.inference.draws = k;
    }
    cfg.validate()?;
    let models = match a.model {
        Some(m) => vec![m],
        None => a.models.clone(),
    };
    let mut seen = Vec::new();
    for m in &models {
        if seen.contains(m) {
            return Err(CliError::Usage(format!("model {m} listed twice")));
        }
        seen.push(*m);
    }
    if a.tau.is_empty() {
        return Err(CliError::Usage("--tau needs at least one interval length".into()));
    }
    let (data, spikes) = load_session(&a.session)?;
    let meshes = cfg.build_meshes(&data, &models)?;
    let report = crossval(&data, &spikes, &meshes, &models, &cfg.priors, &a.tau, &cfg.crossval())?;
    write_score_tables(&report.rows, &a.out)?;
    write_interval_scores(&report, &a.out.join("interval_scores.csv"))?;
    for r in report.rows.iter().filter(|r| r.fold == "combined") {
        eprintln!(
            "tau {:>5} {} {} − {}: mean {:+.4}, p {:.4}",
            r.tau,
            r.score.name(),
            r.model,
            r.baseline,
            r.mean_difference,
            r.p_value
        );
    }
    Manifest::new("crossval", threads)
        .config(&cfg)?
        .input(&a.session)?
        .param("models", models.iter().map(|m| m.code()).collect::<Vec<_>>())
        .param("tau", &a.tau)
        .write(&a.out.join("manifest.json"))
}

/// SHA-256 of a byte slice as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
