//! One runner per subcommand. Each takes its resolved arguments, writes its
//! outputs under `output_dir`, and returns what it computed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use dpm_core::dataset::{read_sample_csv, write_sample_csv, DatasetMeta};
use dpm_core::matrix::SimilarityMatrix;
use dpm_core::mis::{
    approximation_error_term_from_matrix, empirical_risk_from_matrix, estimator_variance_study, PopularityApprox,
    VarianceRecord, VarianceStudyConfig, WeightingScheme,
};
use dpm_core::model::{LinearCosine, SimilarityModel};
use dpm_core::nuclr::{self, EpochMetrics, Mode, NuclrConfig, Schedule, ToyBimodal, WeightOptimizer};
use dpm_core::popularity::{normalize_scale, solve_popularity, verify_fixed_point, PopularitySolution, SolverOptions};
use dpm_core::rng::{seeded, substream};
use dpm_core::scalar::pearson;
use dpm_core::world::{self, AnchorPoint, PairedSample};

use crate::{config_hash, create_file, read_json, real, write_csv, write_json, CliError, CliResult};

fn require_seed(seed: Option<u64>) -> CliResult<u64> {
    seed.ok_or_else(|| CliError::Config("--seed is required".into()))
}

fn check_tau(tau: f64) -> CliResult<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("tau must be positive, got {tau}")))
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    /// Number of pairs.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
    /// Base name of the `.csv` and `.json` files.
    #[arg(long, default_value = "dataset")]
    pub name: String,
}

pub fn gen_data(args: &GenDataArgs) -> CliResult<PairedSample<f64>> {
    let seed = require_seed(args.seed)?;
    if args.n == 0 {
        return Err(CliError::Config("n must be at least 1".into()));
    }
    check_tau(args.tau)?;
    let sample = world::generate_sample(args.n, args.tau, &mut seeded(seed))?;
    let csv_path = args.output_dir.join(format!("{}.csv", args.name));
    let out = create_file(&csv_path)?;
    write_sample_csv(&sample, &[format!("config_hash={}", config_hash("gen-data", args))], out)?;
    write_json(&args.output_dir.join(format!("{}.json", args.name)), &DatasetMeta { n: args.n, tau: args.tau, seed })?;
    Ok(sample)
}

/// Reads a dataset CSV; `tau` falls back to the `.json` sidecar next to it.
pub fn load_dataset(path: &Path, tau: Option<f64>) -> CliResult<PairedSample<f64>> {
    let tau = match tau {
        Some(t) => t,
        None => {
            let sidecar = path.with_extension("json");
            if !sidecar.exists() {
                return Err(CliError::Config(format!("no --tau given and no sidecar {}", sidecar.display())));
            }
            read_json::<DatasetMeta>(&sidecar)?.tau
        }
    };
    check_tau(tau)?;
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_sample_csv(BufReader::new(file), tau)?)
}

// -------------------------------------------------------- solve-popularity

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides the sidecar temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Model checkpoint; the ground-truth bilinear model when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 200_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
    #[arg(long, default_value = "solution")]
    pub name: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub n: usize,
    pub tau: f64,
    pub tol: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub fixed_point_residual: f64,
    /// Present for the ground-truth model on world data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson_vs_true: Option<f64>,
}

fn solver_options(tol: f64, max_iter: usize, step: f64) -> CliResult<SolverOptions<f64>> {
    if !(tol >= 1e-13) || max_iter == 0 || !(step > 0.0) {
        return Err(CliError::Config("need tol >= 1e-13, max_iter >= 1 and step > 0".into()));
    }
    Ok(SolverOptions { tol, max_iter, step })
}

pub fn solve(args: &SolveArgs) -> CliResult<(PopularitySolution<f64>, SolveReport)> {
    let opts = solver_options(args.tol, args.max_iter, args.step)?;
    let sample = load_dataset(&args.data, args.tau)?;
    let model = match &args.checkpoint {
        None => SimilarityModel::GroundTruthBilinear,
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            SimilarityModel::from_checkpoint_json(&text)?
        }
    };
    let k = SimilarityMatrix::from_sample(&model, &sample)?;
    let sol = solve_popularity(&k, &opts)?;
    let residual = verify_fixed_point(&sol, &k)?;
    let (scale, corr) = match model {
        SimilarityModel::GroundTruthBilinear => {
            let q = world::true_popularity(&sample)?;
            let (z, qt) = normalize_scale(&sol.qprime, &q)?;
            (Some(z), Some(pearson(&qt, &q)))
        }
        _ => (None, None),
    };
    let report = SolveReport {
        n: sample.len(),
        tau: sample.tau,
        tol: args.tol,
        iterations: sol.iterations,
        grad_norm: sol.grad_norm,
        converged: sol.converged,
        fixed_point_residual: residual,
        scale,
        pearson_vs_true: corr,
    };
    let hash = config_hash("solve-popularity", args);
    let rows = sol.zeta.iter().zip(&sol.qprime).enumerate().map(|(i, (z, q))| vec![i.to_string(), real(*z), real(*q)]);
    write_csv(&args.output_dir.join(format!("{}.csv", args.name)), &hash, &["index", "zeta", "qprime"], rows)?;
    write_json(&args.output_dir.join(format!("{}.json", args.name)), &report)?;
    if !sol.converged {
        return Err(CliError::NonConvergence(format!(
            "gradient norm {:e} above tol {:e} after {} iterations (outputs flagged)",
            sol.grad_norm, args.tol, sol.iterations
        )));
    }
    Ok((sol, report))
}

// ------------------------------------------------------ shared sweep setup

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [50, 100, 200, 400, 800, 1600])]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Pairs used to estimate the true risk, once per repeat.
    #[arg(long, default_value_t = 50_000)]
    pub n_true_risk: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 200_000)]
    pub max_iter: usize,
    /// Constant `c` of the uniform popularity `q̃ = n·c·1` used by the GCL rows.
    #[arg(long, default_value_t = 1.0)]
    pub gcl_c: f64,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
}

impl SweepArgs {
    fn validate(&self) -> CliResult<u64> {
        let seed = require_seed(self.seed)?;
        check_tau(self.tau)?;
        if self.n_list.is_empty() || self.n_list[0] < 2 || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Config("n_list must be strictly increasing with entries >= 2".into()));
        }
        if self.repeats == 0 || self.n_true_risk == 0 {
            return Err(CliError::Config("repeats and n_true_risk must be at least 1".into()));
        }
        if !(self.gcl_c > 0.0 && self.gcl_c.is_finite()) {
            return Err(CliError::Config("gcl_c must be positive".into()));
        }
        solver_options(self.tol, self.max_iter, 1.0)?;
        Ok(seed)
    }
}

/// Seed of one repeat; repeats are independent of each other and of `n`.
pub fn repeat_seed(seed: u64, repeat: usize) -> u64 {
    seed ^ repeat as u64
}

struct Instance {
    k: SimilarityMatrix<f64>,
    sample: PairedSample<f64>,
    q_true: Vec<f64>,
    solution: PopularitySolution<f64>,
    qtilde: Vec<f64>,
}

fn instance(args: &SweepArgs, seed: u64, n: usize, repeat: usize) -> CliResult<Instance> {
    let sample = world::generate_sample(n, args.tau, &mut substream(repeat_seed(seed, repeat), 1 + n as u64))?;
    let k = SimilarityMatrix::from_sample(&SimilarityModel::GroundTruthBilinear, &sample)?;
    let q_true = world::true_popularity(&sample)?;
    let solution = solve_popularity(&k, &SolverOptions { tol: args.tol, max_iter: args.max_iter, step: 1.0 })?;
    let (_, qtilde) = normalize_scale(&solution.qprime, &q_true)?;
    Ok(Instance { k, sample, q_true, solution, qtilde })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gcl,
    MleExact,
    Ours,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Self::Gcl => "gcl",
            Self::MleExact => "mle_exact",
            Self::Ours => "ours",
        }
    }
}

// --------------------------------------------------------- gen-error-sweep

#[derive(Debug, Clone, PartialEq)]
pub struct GenErrorRow {
    pub n: usize,
    pub repeat: usize,
    pub method: Method,
    pub empirical_risk: f64,
    pub true_risk: f64,
    pub abs_gen_error: f64,
    /// False when the popularity solver stopped short of its tolerance.
    pub converged: bool,
}

/// Rows sorted by `(n, repeat, method)`.
pub fn gen_error_rows(args: &SweepArgs) -> CliResult<Vec<GenErrorRow>> {
    let seed = args.validate()?;
    let gt = SimilarityModel::GroundTruthBilinear;
    let mut rows = Vec::new();
    for repeat in 0..args.repeats {
        let l = world::estimate_true_risk(&gt, args.tau, args.n_true_risk, &mut substream(repeat_seed(seed, repeat), 0))?.mean;
        for &n in &args.n_list {
            let inst = instance(args, seed, n, repeat)?;
            let uniform = PopularityApprox::uniform(n, args.gcl_c)?;
            let risks = [
                (Method::Gcl, empirical_risk_from_matrix(&inst.k, &uniform)?, true),
                (Method::MleExact, world::mle_empirical_risk(&inst.sample)?, true),
                (Method::Ours, empirical_risk_from_matrix(&inst.k, &PopularityApprox::new(inst.qtilde)?)?, inst.solution.converged),
            ];
            for (method, risk, converged) in risks {
                rows.push(GenErrorRow {
                    n,
                    repeat,
                    method,
                    empirical_risk: risk,
                    true_risk: l,
                    abs_gen_error: (risk - l).abs(),
                    converged,
                });
            }
        }
    }
    rows.sort_by(|a, b| (a.n, a.repeat, a.method).cmp(&(b.n, b.repeat, b.method)));
    Ok(rows)
}

/// Mean of `value` per `(method, n)`.
pub fn means_by<R>(rows: &[R], key: impl Fn(&R) -> (Method, usize), value: impl Fn(&R) -> f64) -> BTreeMap<(Method, usize), f64> {
    let mut acc: BTreeMap<(Method, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(key(r)).or_default();
        e.0 += value(r);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
}

pub fn gen_error_sweep(args: &SweepArgs) -> CliResult<Vec<GenErrorRow>> {
    let rows = gen_error_rows(args)?;
    let name = args.name.clone().unwrap_or_else(|| "gen_error".into());
    let csv_rows = rows.iter().map(|r| {
        vec![
            r.n.to_string(),
            r.repeat.to_string(),
            r.method.label().into(),
            real(r.empirical_risk),
            real(r.true_risk),
            real(r.abs_gen_error),
            r.converged.to_string(),
        ]
    });
    write_csv(
        &args.output_dir.join(format!("{name}.csv")),
        &config_hash("gen-error-sweep", args),
        &["n", "repeat", "method", "empirical_risk", "true_risk", "abs_gen_error", "converged"],
        csv_rows,
    )?;
    Ok(rows)
}

// -------------------------------------------------------- error-term-sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TermMethod {
    /// `q̃ = q`, a control that must give zero.
    Exact,
    Ours,
    Uniform,
}

impl TermMethod {
    pub fn label(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Ours => "ours",
            Self::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTermRow {
    pub n: usize,
    pub repeat: usize,
    pub method: TermMethod,
    pub error_term: f64,
    pub converged: bool,
}

pub fn error_term_rows(args: &SweepArgs) -> CliResult<Vec<ErrorTermRow>> {
    let seed = args.validate()?;
    let mut rows = Vec::new();
    for repeat in 0..args.repeats {
        for &n in &args.n_list {
            let inst = instance(args, seed, n, repeat)?;
            let exact = PopularityApprox::new(inst.q_true.clone())?;
            let uniform = PopularityApprox::uniform(n, args.gcl_c)?;
            let ours = PopularityApprox::new(inst.qtilde.clone())?;
            for (method, q, converged) in [
                (TermMethod::Exact, &exact, true),
                (TermMethod::Ours, &ours, inst.solution.converged),
                (TermMethod::Uniform, &uniform, true),
            ] {
                let error_term = approximation_error_term_from_matrix(&inst.k, q, &inst.q_true)?;
                rows.push(ErrorTermRow { n, repeat, method, error_term, converged });
            }
        }
    }
    rows.sort_by(|a, b| (a.n, a.repeat, a.method).cmp(&(b.n, b.repeat, b.method)));
    Ok(rows)
}

pub fn error_term_sweep(args: &SweepArgs) -> CliResult<Vec<ErrorTermRow>> {
    let rows = error_term_rows(args)?;
    let name = args.name.clone().unwrap_or_else(|| "error_term".into());
    let csv_rows = rows.iter().map(|r| {
        vec![r.n.to_string(), r.repeat.to_string(), r.method.label().into(), real(r.error_term), r.converged.to_string()]
    });
    write_csv(
        &args.output_dir.join(format!("{name}.csv")),
        &config_hash("error-term-sweep", args),
        &["n", "repeat", "method", "error_term", "converged"],
        csv_rows,
    )?;
    Ok(rows)
}

// ---------------------------------------------------------- variance-study

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `x1,x2`, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok([p(a)?, p(b)?])
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    /// `balance`, `uniform` or `single<k>`.
    #[arg(long, value_delimiter = ',', default_values_t = ["balance".to_string(), "uniform".to_string(), "single0".to_string()])]
    pub schemes: Vec<String>,
    /// Cells as `<n>x<m>`.
    #[arg(long, value_delimiter = ',', default_values_t = ["8x1".to_string(), "32x1".to_string(), "8x4".to_string()])]
    pub grid: Vec<String>,
    #[arg(long, default_value_t = 2000)]
    pub repeats: usize,
    /// Anchor whose partition function is estimated.
    #[arg(long, default_value_t = 0)]
    pub target_index: usize,
    /// Explicit anchor pool (`--anchor=x1,x2`, repeatable); drawn from the
    /// world when empty.
    #[arg(long = "anchor", value_parser = parse_pair, allow_hyphen_values = true)]
    pub anchors: Vec<[f64; 2]>,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
    #[arg(long, default_value = "variance")]
    pub name: String,
}

fn parse_cell(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Config(format!("grid cell `{s}` is not <n>x<m>"));
    let (n, m) = s.split_once('x').ok_or_else(bad)?;
    Ok((n.trim().parse().map_err(|_| bad())?, m.trim().parse().map_err(|_| bad())?))
}

pub fn variance_records(args: &VarianceArgs) -> CliResult<Vec<VarianceRecord<f64>>> {
    let seed = require_seed(args.seed)?;
    check_tau(args.tau)?;
    let schemes = args.schemes.iter().map(|s| WeightingScheme::parse(s)).collect::<dpm_core::Result<Vec<_>>>()?;
    let grid = args.grid.iter().map(|c| parse_cell(c)).collect::<CliResult<Vec<_>>>()?;
    let pool = grid.iter().map(|c| c.0).max().unwrap_or(0);
    let anchors = if args.anchors.is_empty() {
        let mut rng = substream(seed, 0);
        (0..pool).map(|_| world::sample_anchor(&mut rng)).collect::<dpm_core::Result<Vec<_>>>()?
    } else {
        args.anchors.iter().map(|a| AnchorPoint::new(a[0], a[1])).collect::<dpm_core::Result<Vec<_>>>()?
    };
    let config = VarianceStudyConfig { anchors, target_index: args.target_index, schemes, grid, repeats: args.repeats, tau: args.tau, seed };
    Ok(estimator_variance_study(&config)?)
}

pub fn variance_study(args: &VarianceArgs) -> CliResult<Vec<VarianceRecord<f64>>> {
    let recs = variance_records(args)?;
    let rows = recs.iter().map(|r| {
        vec![
            r.scheme.label(),
            r.n.to_string(),
            r.m.to_string(),
            r.repeats.to_string(),
            real(r.mean),
            real(r.variance),
            real(r.exact),
            real(r.abs_bias),
        ]
    });
    write_csv(
        &args.output_dir.join(format!("{}.csv", args.name)),
        &config_hash("variance-study", args),
        &["scheme", "n", "m", "repeats", "mean", "variance", "exact", "abs_bias"],
        rows,
    )?;
    Ok(recs)
}

// ------------------------------------------------------------- train-nuclr

fn parse_enum<E: serde::de::DeserializeOwned>(s: &str) -> Result<E, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Paired training CSV; the toy bimodal task when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Paired evaluation CSV for recall@1 (with `--data`).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 2048)]
    pub n_train: usize,
    #[arg(long, default_value_t = 512)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 8)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.8)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lr_w: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lr_zeta: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum_w: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum_zeta: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub zeta0: f64,
    #[arg(long, default_value_t = 5)]
    pub freeze_epochs: usize,
    /// `constant` or `cosine`.
    #[arg(long, default_value = "cosine", value_parser = parse_enum::<Schedule>)]
    pub schedule: Schedule,
    /// `unidirectional` or `symmetric`.
    #[arg(long, default_value = "unidirectional", value_parser = parse_enum::<Mode>)]
    pub mode: Mode,
    /// `momentum` or `adam`.
    #[arg(long, default_value = "momentum", value_parser = parse_enum::<WeightOptimizer>)]
    pub optimizer: WeightOptimizer,
    /// Fix ζ ≡ 0 and ξ ≡ 0 (SogCLR).
    #[arg(long)]
    pub sogclr: bool,
    /// Disable the exp(−ξ/τ) replacement in the model gradient.
    #[arg(long)]
    pub no_xi_trick: bool,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
    #[arg(long, default_value = "nuclr")]
    pub name: String,
}

impl TrainArgs {
    pub fn nuclr_config(&self) -> NuclrConfig {
        NuclrConfig {
            tau: self.tau,
            batch_size: self.batch_size,
            epochs: self.epochs,
            gamma: self.gamma,
            lr_w: self.lr_w,
            lr_zeta: self.lr_zeta,
            momentum_w: self.momentum_w,
            momentum_zeta: self.momentum_zeta,
            zeta0: self.zeta0,
            freeze_epochs: self.freeze_epochs,
            schedule: self.schedule,
            mode: self.mode,
            optimizer: self.optimizer,
            sogclr: self.sogclr,
            xi_trick: !self.no_xi_trick,
            ..NuclrConfig::default()
        }
    }
}

#[derive(Serialize)]
struct TrackDump<'a> {
    zeta: &'a [f64],
    u: &'a [f64],
    xi: f64,
}

#[derive(Serialize)]
struct StateDump<'a> {
    step: usize,
    tracks: Vec<TrackDump<'a>>,
}

pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub model: SimilarityModel<f64>,
    pub n_eval: usize,
}

pub fn train_nuclr(args: &TrainArgs) -> CliResult<TrainReport> {
    let seed = require_seed(args.seed)?;
    let config = args.nuclr_config();
    config.validate()?;
    if args.latent_dim == 0 {
        return Err(CliError::Config("latent_dim must be at least 1".into()));
    }
    let (train, eval) = match &args.data {
        Some(path) => {
            let train = load_dataset(path, Some(args.tau))?;
            let eval = args.eval_data.as_deref().map(|p| load_dataset(p, Some(args.tau))).transpose()?;
            (train, eval)
        }
        None => {
            if args.n_train < 2 || args.n_eval < 1 {
                return Err(CliError::Config("n_train must be >= 2 and n_eval >= 1".into()));
            }
            let toy = ToyBimodal::new(&mut substream(seed, 1));
            let train = toy.sample(args.n_train, args.tau, &mut substream(seed, 2))?;
            let eval = toy.sample(args.n_eval, args.tau, &mut substream(seed, 3))?;
            (train, Some(eval))
        }
    };
    let model = SimilarityModel::LinearCosine(LinearCosine::init(
        args.latent_dim,
        train.anchors[0].len(),
        train.targets[0].len(),
        &mut substream(seed, 4),
    )?);
    let out = nuclr::train(&train, eval.as_ref(), model, &config, &mut substream(seed, 5))?;

    let hash = config_hash("train-nuclr", args);
    let rows = out.metrics.iter().map(|m| {
        vec![m.epoch.to_string(), real(m.phi_full), real(m.psi_full), real(m.recall_at_1), real(m.zeta_min), real(m.zeta_max), real(m.xi)]
    });
    write_csv(
        &args.output_dir.join(format!("{}_metrics.csv", args.name)),
        &hash,
        &["epoch", "phi_full", "psi_full", "recall_at_1", "zeta_min", "zeta_max", "xi"],
        rows,
    )?;
    let ckpt = args.output_dir.join(format!("{}_checkpoint.json", args.name));
    let mut f = create_file(&ckpt)?;
    use std::io::Write;
    writeln!(f, "{}", out.model.to_checkpoint_json()?).and_then(|_| f.flush()).map_err(|e| CliError::io(&ckpt, e))?;
    let state = StateDump {
        step: out.state.step,
        tracks: out.state.tracks.iter().map(|t| TrackDump { zeta: &t.zeta, u: &t.u, xi: t.xi }).collect(),
    };
    write_json(&args.output_dir.join(format!("{}_state.json", args.name)), &state)?;
    Ok(TrainReport { metrics: out.metrics, model: out.model, n_eval: eval.map_or(0, |e| e.len()) })
}
