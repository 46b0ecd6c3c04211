//! Command-line surface: simulate | fit | icc | test-homogeneity |
//! benchmark | cluster, with machine-readable JSON/CSV outputs. Every
//! subcommand is deterministic given its flags and seed; wall times live in
//! a separate metadata block excluded from that contract.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::benchmark::{run_scenario, timing_scenario, Scenario};
use crate::error::{RcmError, Result};
use crate::estimators::{fit_rcm_default, EstimatorTag, FitConfig, FitResult};
use crate::inference::{icc, permutation_test, HomogeneityConfig};
use crate::ingest::{cluster_modules, load_studies, select_top_variance, to_correlation, to_study_data, StudySet};
use crate::likelihood::StudyData;
use crate::matrixcore::SpdMatrix;
use crate::sampling::{generate_rcm_dataset, RcmParams};

/// Fixed default seed so bare invocations reproduce; override with --seed
/// or the RCM_SEED environment variable.
pub const DEFAULT_SEED: u64 = 42;

pub const FORMAT_VERSION: &str = "1";

#[derive(Parser, Debug)]
#[command(name = "rcm", version, about = "Hierarchical random covariance model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Worker threads for benchmark and permutation parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate synthetic studies from the model and write CSVs + manifest.
    Simulate(SimulateArgs),
    /// Fit the model to study CSVs (or a scatter JSON) and emit estimates.
    Fit(FitArgs),
    /// Evaluate the intra-class correlation 1/(nu - p).
    Icc(IccArgs),
    /// Permutation test of "all studies share one covariance".
    TestHomogeneity(TestArgs),
    /// Run a named benchmark scenario and emit the result table.
    Benchmark(BenchArgs),
    /// Cluster features into modules from a correlation matrix or a fit.
    Cluster(ClusterArgs),
}

#[derive(Args, Debug)]
struct SeedArg {
    #[arg(long, env = "RCM_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FitFlags {
    /// Inner Psi-update of the coordinate ascent.
    #[arg(long, default_value = "em")]
    inner: EstimatorTag,
    /// Log-likelihood increment stopping the outer loop.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Keep only the top-k features by pooled variance.
    #[arg(long)]
    top: Option<usize>,
    /// Skip per-study column centering.
    #[arg(long)]
    no_center: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    p: usize,
    #[arg(long)]
    nu: f64,
    /// Comma-separated study sizes, e.g. 7,7,7.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// identity | cs:VAR,COV | path to a matrix file (JSON {dim, rows} or
    /// headerless CSV).
    #[arg(long, default_value = "identity")]
    psi: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Study CSV/TSV files, or a single scatter JSON.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    fit: FitFlags,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IccArgs {
    #[arg(long)]
    nu: f64,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TestArgs {
    /// Study CSV/TSV files with raw observation rows.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    permutations: usize,
    #[command(flatten)]
    fit: FitFlags,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScenarioName {
    Scenario1,
    Scenario2,
    Timing,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioName,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Dimensions for the timing scenario.
    #[arg(long, value_delimiter = ',', default_value = "5,25,50,100")]
    p_grid: Vec<usize>,
    /// Fits per dimension for the timing scenario.
    #[arg(long, default_value_t = 10)]
    fits: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: OutputFormat,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    /// Study CSVs to fit inline, or (with --correlation) one matrix CSV.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Treat the single input as a correlation matrix with a header row.
    #[arg(long)]
    correlation: bool,
    /// Module count; clamped to the feature count.
    #[arg(long, default_value_t = 5)]
    modules: usize,
    #[command(flatten)]
    fit: FitFlags,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Matrix wire form: explicit dimension plus nested row arrays.
#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct MatrixJson {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl MatrixJson {
    fn from_array(a: &Array2<f64>) -> Self {
        MatrixJson {
            dim: a.nrows(),
            rows: a.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn to_array(&self) -> Result<Array2<f64>> {
        if self.rows.len() != self.dim || self.rows.iter().any(|r| r.len() != self.dim) {
            return Err(RcmError::Schema(format!(
                "matrix dim {} does not match row layout",
                self.dim
            )));
        }
        Ok(Array2::from_shape_fn((self.dim, self.dim), |(i, j)| self.rows[i][j]))
    }
}

#[derive(Serialize, Deserialize, Debug)]
struct ScatterStudyJson {
    name: String,
    n: usize,
    scatter: MatrixJson,
}

/// Precomputed sufficient statistics accepted by `fit`.
#[derive(Serialize, Deserialize, Debug)]
struct ScatterFileJson {
    format_version: String,
    studies: Vec<ScatterStudyJson>,
}

#[derive(Serialize, Debug)]
struct ManifestJson {
    format_version: &'static str,
    seed: u64,
    nu: f64,
    psi: MatrixJson,
    sizes: Vec<usize>,
    files: Vec<String>,
}

#[derive(Serialize, Debug)]
struct ConfigEcho {
    inner: String,
    eps: f64,
    max_iter: usize,
    top: Option<usize>,
    center: bool,
}

#[derive(Serialize, Debug)]
struct Metadata {
    wall_time: f64,
}

#[derive(Serialize, Debug)]
struct FitJson {
    format_version: &'static str,
    seed: u64,
    config: ConfigEcho,
    estimator: String,
    features: Option<Vec<String>>,
    nu_hat: f64,
    nu_saturated: bool,
    icc: Option<f64>,
    psi_hat: MatrixJson,
    sigma_hat: Option<MatrixJson>,
    correlation: Option<MatrixJson>,
    loglik_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    warnings: Vec<String>,
    metadata: Metadata,
}

fn write_output(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, content)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(content.as_bytes())?;
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| RcmError::Schema(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn parse_matrix_file(path: &Path) -> Result<Array2<f64>> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let text = fs::read_to_string(path)?;
        let m: MatrixJson = serde_json::from_str(&text)
            .map_err(|e| RcmError::Parse(format!("{}: {e}", path.display())))?;
        m.to_array()
    } else {
        let text = fs::read_to_string(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.trim().parse().map_err(|_| {
                        RcmError::Parse(format!("{}: line {}: '{f}'", path.display(), i + 1))
                    })
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        let p = rows.len();
        if p == 0 || rows.iter().any(|r| r.len() != p) {
            return Err(RcmError::Schema(format!("{}: not a square matrix", path.display())));
        }
        Ok(Array2::from_shape_fn((p, p), |(i, j)| rows[i][j]))
    }
}

/// identity | cs:VAR,COV | compound-symmetry:VAR,COV | matrix file path.
fn parse_psi_spec(spec: &str, p: usize) -> Result<SpdMatrix> {
    if spec == "identity" {
        return Ok(SpdMatrix::identity(p));
    }
    let cs = spec
        .strip_prefix("cs:")
        .or_else(|| spec.strip_prefix("compound-symmetry:"));
    if let Some(rest) = cs {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 2 {
            return Err(RcmError::Parse(format!("psi spec '{spec}': expected VAR,COV")));
        }
        let var: f64 = parts[0]
            .trim()
            .parse()
            .map_err(|_| RcmError::Parse(format!("psi spec '{spec}': bad VAR")))?;
        let cov: f64 = parts[1]
            .trim()
            .parse()
            .map_err(|_| RcmError::Parse(format!("psi spec '{spec}': bad COV")))?;
        return SpdMatrix::compound_symmetry(p, var, cov);
    }
    let m = parse_matrix_file(Path::new(spec))?;
    if m.nrows() != p {
        return Err(RcmError::DimensionMismatch { expected: p, got: m.nrows() });
    }
    SpdMatrix::new(m)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let psi = parse_psi_spec(&args.psi, args.p)?;
    let params = RcmParams::new(psi, args.nu)?;
    let ds = generate_rcm_dataset(args.seed.seed, &params, &args.sizes)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut files = Vec::new();
    for (si, x) in ds.studies.iter().enumerate() {
        let name = format!("study_{:02}.csv", si + 1);
        let mut w = csv::Writer::from_path(args.out_dir.join(&name))
            .map_err(|e| RcmError::Schema(e.to_string()))?;
        let header: Vec<String> = (1..=args.p).map(|j| format!("f{j}")).collect();
        w.write_record(&header).map_err(|e| RcmError::Schema(e.to_string()))?;
        for row in x.rows() {
            let rec: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            w.write_record(&rec).map_err(|e| RcmError::Schema(e.to_string()))?;
        }
        w.flush()?;
        files.push(name);
    }
    let manifest = ManifestJson {
        format_version: FORMAT_VERSION,
        seed: args.seed.seed,
        nu: args.nu,
        psi: MatrixJson::from_array(params.psi.entries()),
        sizes: args.sizes.clone(),
        files,
    };
    fs::write(args.out_dir.join("manifest.json"), to_json(&manifest)?)?;
    Ok(())
}

fn fit_config(flags: &FitFlags) -> FitConfig {
    FitConfig {
        inner: flags.inner,
        eps: flags.eps,
        max_iter: flags.max_iter,
        ..FitConfig::default()
    }
}

fn is_scatter_json(paths: &[PathBuf]) -> bool {
    paths.len() == 1 && paths[0].extension().and_then(|e| e.to_str()) == Some("json")
}

fn load_scatter_json(path: &Path) -> Result<(Vec<StudyData>, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let file: ScatterFileJson = serde_json::from_str(&text)
        .map_err(|e| RcmError::Parse(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut names = Vec::new();
    for s in &file.studies {
        data.push(StudyData::new(s.scatter.to_array()?, s.n)?);
        names.push(s.name.clone());
    }
    Ok((data, names))
}

fn load_selected(paths: &[PathBuf], top: Option<usize>) -> Result<StudySet> {
    let set = load_studies(paths)?;
    match top {
        Some(k) => select_top_variance(&set, k),
        None => Ok(set),
    }
}

fn run_fit(data: &[StudyData], flags: &FitFlags) -> Result<FitResult> {
    let res = fit_rcm_default(data, &fit_config(flags))?;
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    Ok(res)
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let (data, features) = if is_scatter_json(&args.inputs) {
        let (data, _) = load_scatter_json(&args.inputs[0])?;
        (data, None)
    } else {
        let set = load_selected(&args.inputs, args.fit.top)?;
        let data = to_study_data(&set, !args.fit.no_center)?;
        (data, Some(set.features))
    };
    let res = run_fit(&data, &args.fit)?;
    let p = res.psi_hat.dim();
    let correlation = match &res.sigma_hat {
        Some(s) => Some(MatrixJson::from_array(&to_correlation(s.entries())?)),
        None => None,
    };
    let out = FitJson {
        format_version: FORMAT_VERSION,
        seed: args.seed.seed,
        config: ConfigEcho {
            inner: args.fit.inner.to_string(),
            eps: args.fit.eps,
            max_iter: args.fit.max_iter,
            top: args.fit.top,
            center: !args.fit.no_center,
        },
        estimator: res.estimator.to_string(),
        features,
        nu_hat: res.nu_hat,
        nu_saturated: res.nu_saturated,
        icc: if res.nu_hat > p as f64 { Some(icc(res.nu_hat, p)?) } else { None },
        psi_hat: MatrixJson::from_array(res.psi_hat.entries()),
        sigma_hat: res.sigma_hat.as_ref().map(|s| MatrixJson::from_array(s.entries())),
        correlation,
        loglik_trace: res.loglik_trace.clone(),
        iterations: res.iterations,
        converged: res.converged,
        warnings: res.warnings.clone(),
        metadata: Metadata { wall_time: res.wall_time },
    };
    write_output(&args.out, &to_json(&out)?)
}

#[derive(Serialize, Debug)]
struct IccJson {
    format_version: &'static str,
    nu: f64,
    p: usize,
    icc: f64,
}

fn cmd_icc(args: &IccArgs) -> Result<()> {
    let out = IccJson {
        format_version: FORMAT_VERSION,
        nu: args.nu,
        p: args.p,
        icc: icc(args.nu, args.p)?,
    };
    write_output(&args.out, &to_json(&out)?)
}

#[derive(Serialize, Debug)]
struct HomogeneityJson {
    format_version: &'static str,
    seed: u64,
    nu_obs: f64,
    null_nus: Vec<f64>,
    p_value: f64,
    n_permutations: usize,
    metadata: Metadata,
}

fn cmd_test_homogeneity(args: &TestArgs) -> Result<()> {
    if args.inputs.iter().any(|p| p.extension().and_then(|e| e.to_str()) == Some("json")) {
        return Err(RcmError::domain(
            "test-homogeneity needs raw observation rows; \
             scatter matrices cannot be permuted",
        ));
    }
    let start = std::time::Instant::now();
    let set = load_selected(&args.inputs, args.fit.top)?;
    let raw: Vec<Array2<f64>> = set.studies.iter().map(|s| s.data.clone()).collect();
    let cfg = HomogeneityConfig {
        fit: fit_config(&args.fit),
        recenter: !args.fit.no_center,
        seed: args.seed.seed,
    };
    let test = permutation_test(&raw, args.permutations, &cfg)?;
    let out = HomogeneityJson {
        format_version: FORMAT_VERSION,
        seed: test.seed,
        nu_obs: test.nu_obs,
        null_nus: test.null_nus.clone(),
        p_value: test.p_value,
        n_permutations: test.n_permutations,
        metadata: Metadata { wall_time: start.elapsed().as_secs_f64() },
    };
    write_output(&args.out, &to_json(&out)?)
}

#[derive(Serialize, Debug)]
struct BenchJson {
    format_version: &'static str,
    seed: u64,
    scenario: String,
    rows: Vec<BenchRowJson>,
    metadata: Metadata,
}

#[derive(Serialize, Debug)]
struct BenchRowJson {
    estimator: String,
    n_i: Option<usize>,
    p: Option<usize>,
    mean_sse: Option<f64>,
    ci99_half_width: Option<f64>,
    mean_seconds: f64,
    replications: Option<usize>,
    failures: Option<usize>,
}

fn cmd_benchmark(args: &BenchArgs) -> Result<()> {
    let start = std::time::Instant::now();
    let (rows, scenario_name) = match args.scenario {
        ScenarioName::Scenario1 | ScenarioName::Scenario2 => {
            let sc = match args.scenario {
                ScenarioName::Scenario1 => Scenario::scenario1(args.reps, args.seed.seed),
                _ => Scenario::scenario2(args.reps, args.seed.seed),
            };
            let res = run_scenario(&sc)?;
            let rows = res
                .rows
                .iter()
                .map(|r| BenchRowJson {
                    estimator: r.estimator.to_string(),
                    n_i: Some(r.n_i),
                    p: None,
                    mean_sse: Some(r.mean_sse),
                    ci99_half_width: Some(r.ci99_half_width),
                    mean_seconds: r.mean_seconds,
                    replications: Some(r.replications),
                    failures: Some(r.failures),
                })
                .collect();
            let name = if matches!(args.scenario, ScenarioName::Scenario1) {
                "scenario1"
            } else {
                "scenario2"
            };
            (rows, name)
        }
        ScenarioName::Timing => {
            let rows = timing_scenario(&args.p_grid, args.fits, args.seed.seed)?
                .iter()
                .map(|r| BenchRowJson {
                    estimator: r.estimator.to_string(),
                    n_i: None,
                    p: Some(r.p),
                    mean_sse: None,
                    ci99_half_width: None,
                    mean_seconds: r.mean_seconds,
                    replications: None,
                    failures: None,
                })
                .collect();
            (rows, "timing")
        }
    };
    match args.format {
        OutputFormat::Json => {
            let out = BenchJson {
                format_version: FORMAT_VERSION,
                seed: args.seed.seed,
                scenario: scenario_name.to_string(),
                rows,
                metadata: Metadata { wall_time: start.elapsed().as_secs_f64() },
            };
            write_output(&args.out, &to_json(&out)?)
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "estimator",
                "n_i",
                "p",
                "mean_sse",
                "ci99_half_width",
                "mean_seconds",
                "replications",
                "failures",
            ])
            .map_err(|e| RcmError::Schema(e.to_string()))?;
            let opt = |v: Option<String>| v.unwrap_or_default();
            for r in &rows {
                w.write_record([
                    r.estimator.clone(),
                    opt(r.n_i.map(|v| v.to_string())),
                    opt(r.p.map(|v| v.to_string())),
                    opt(r.mean_sse.map(|v| format!("{v}"))),
                    opt(r.ci99_half_width.map(|v| format!("{v}"))),
                    format!("{}", r.mean_seconds),
                    opt(r.replications.map(|v| v.to_string())),
                    opt(r.failures.map(|v| v.to_string())),
                ])
                .map_err(|e| RcmError::Schema(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| RcmError::Schema(e.to_string()))?;
            write_output(&args.out, &String::from_utf8_lossy(&bytes))
        }
    }
}

fn cmd_cluster(args: &ClusterArgs) -> Result<()> {
    let (features, corr) = if args.correlation {
        if args.inputs.len() != 1 {
            return Err(RcmError::domain("--correlation takes exactly one matrix file"));
        }
        let set = load_studies(&args.inputs)?;
        let m = &set.studies[0].data;
        if m.nrows() != m.ncols() {
            return Err(RcmError::Schema(format!(
                "correlation matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        (set.features, m.clone())
    } else {
        let set = load_selected(&args.inputs, args.fit.top)?;
        let data = to_study_data(&set, !args.fit.no_center)?;
        let res = run_fit(&data, &args.fit)?;
        let sigma = res
            .sigma_hat
            .ok_or_else(|| RcmError::domain("fit produced no covariance (nu_hat <= p + 1)"))?;
        (set.features, to_correlation(sigma.entries())?)
    };
    let n_modules = args.modules.min(features.len()).max(1);
    let modules = cluster_modules(&corr, n_modules)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["feature", "module", "connectivity"])
        .map_err(|e| RcmError::Schema(e.to_string()))?;
    for (i, f) in features.iter().enumerate() {
        w.write_record([
            f.clone(),
            modules.labels[i].to_string(),
            format!("{}", modules.connectivity[i]),
        ])
        .map_err(|e| RcmError::Schema(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| RcmError::Schema(e.to_string()))?;
    write_output(&args.out, &String::from_utf8_lossy(&bytes))
}

/// Parses arguments, dispatches, and maps errors to exit codes: 0 on
/// success, 2 with a category-prefixed message on standard error otherwise.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version on stdout with success
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.threads > 0 {
        // a failure here means a pool already exists (tests); keep going
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let result = match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Icc(a) => cmd_icc(a),
        Cmd::TestHomogeneity(a) => cmd_test_homogeneity(a),
        Cmd::Benchmark(a) => cmd_benchmark(a),
        Cmd::Cluster(a) => cmd_cluster(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}: {e}", e.category());
            2
        }
    }
}
