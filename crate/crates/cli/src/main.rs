use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use fetr_core::data::manifest::load_manifest_with_names;
use fetr_core::data::{generate_synthetic, rff_transform, write_report};
use fetr_core::experiments::{self, BenchOptions, BenchStatus, COMPARE_TRACE_HEADER};
use fetr_core::trainer::{evaluate, MetricKind};
use fetr_core::wsolve::GdOptions;
use fetr_core::{fit_fetr, FetrConfig, FetrError, MultitaskDataset, WSolverKind};

#[derive(Parser)]
#[command(name = "fetr", version, about = "Multitask regression with bounded-spectrum feature and task precisions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a report bundle.
    Train(TrainArgs),
    /// k-fold cross-validation over a grid of eta values.
    Cv(CvArgs),
    /// Time the three weight-block solvers on synthetic problems.
    BenchW(BenchArgs),
    /// Run block descent, projected gradient and flip-flop under one budget.
    Compare(CompareArgs),
}

/// Hyperparameters shared by every command; unset flags fall back to the
/// config file, then to the command's defaults.
#[derive(Args, Clone)]
struct Hyper {
    /// JSON file with any subset of the config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    l: Option<f64>,
    #[arg(long)]
    u: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_outer_iters: Option<usize>,
    #[arg(long)]
    rel_obj_tol: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
    /// auto | closed | gd | sylvester
    #[arg(long)]
    w_solver: Option<WSolverKind>,
    /// Random Fourier features as `p,bandwidth`.
    #[arg(long)]
    rff: Option<String>,
    /// Use orthogonal random features.
    #[arg(long)]
    orthogonal: bool,
    #[arg(long, default_value = "mse")]
    metric: MetricKind,
    /// Prefix of the report files.
    #[arg(long, default_value = "fetr")]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long)]
    w_solver: Option<WSolverKind>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// `1e-5..1e3` for every decade, or a comma-separated list.
    #[arg(long, default_value = "1e-5..1e3")]
    eta_grid: String,
    #[arg(long, default_value = "nmse")]
    metric: MetricKind,
    #[arg(long)]
    rff: Option<String>,
    #[arg(long)]
    orthogonal: bool,
    /// Also write the JSON result here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// `d,m` pairs separated by `;`, e.g. `10,5;20,10`.
    #[arg(long, default_value = "10,5;20,10;40,10;40,40;80,40")]
    grid: String,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Prefix of the timing CSVs.
    #[arg(long, default_value = "bench")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long, conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    /// Synthetic problem as `n,d,m`.
    #[arg(long, default_value = "2000,30,10")]
    synthetic: String,
    #[arg(long, default_value_t = 20.0)]
    budget_seconds: f64,
    /// Flip-flop fudge factor.
    #[arg(long, default_value_t = 1e-3)]
    fudge: f64,
    #[arg(long)]
    w_solver: Option<WSolverKind>,
    /// Prefix of the trace CSVs and summary JSON.
    #[arg(long, default_value = "compare")]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Fetr(FetrError),
}

impl From<FetrError> for Failure {
    fn from(e: FetrError) -> Self {
        match e {
            FetrError::InvalidConfig(msg) => Failure::Usage(msg),
            e => Failure::Fetr(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Cv(a) => cv(a),
        Command::BenchW(a) => bench(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Fetr(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 3 } else { 4 })
        }
    }
}

fn resolve_config(hyper: &Hyper, defaults: FetrConfig, w_solver: Option<WSolverKind>) -> Result<FetrConfig, Failure> {
    let mut merged = serde_json::to_value(&defaults).expect("config serializes");
    if let Some(path) = &hyper.config {
        let text = fs::read_to_string(path).map_err(|source| FetrError::Io {
            path: path.clone(),
            source,
        })?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let Value::Object(fields) = file else {
            return Err(Failure::Usage(format!("{}: expected a JSON object", path.display())));
        };
        merged.as_object_mut().expect("object").extend(fields);
    }
    let mut cfg: FetrConfig = serde_json::from_value(merged).map_err(|e| Failure::Usage(format!("config: {e}")))?;
    if let Some(v) = hyper.eta {
        cfg.eta = v;
    }
    if let Some(v) = hyper.l {
        cfg.l = v;
    }
    if let Some(v) = hyper.u {
        cfg.u = v;
    }
    if let Some(v) = hyper.seed {
        cfg.seed = v;
    }
    if let Some(v) = hyper.max_outer_iters {
        cfg.max_outer_iters = v;
    }
    if let Some(v) = hyper.rel_obj_tol {
        cfg.rel_obj_tol = v;
    }
    if let Some(v) = w_solver {
        cfg.w_solver = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults for the benchmark and comparison commands.
fn synthetic_defaults() -> FetrConfig {
    FetrConfig {
        eta: 1.0,
        l: 0.01,
        u: 100.0,
        ..FetrConfig::default()
    }
}

fn parse_list<const N: usize>(s: &str, what: &str) -> Result<[f64; N], Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Failure::Usage(format!("--{what} expects {N} comma-separated numbers, got '{s}'"));
    if parts.len() != N {
        return Err(bad());
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| bad())?;
    }
    Ok(out)
}

fn as_count(v: f64, what: &str) -> Result<usize, Failure> {
    if v >= 1.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(Failure::Usage(format!("--{what}: {v} is not a positive integer")))
    }
}

fn apply_rff(data: MultitaskDataset, rff: Option<&str>, orthogonal: bool, seed: u64) -> Result<MultitaskDataset, Failure> {
    let Some(spec) = rff else {
        return Ok(data);
    };
    let [p, bandwidth] = parse_list::<2>(spec, "rff")?;
    Ok(rff_transform(&data, as_count(p, "rff")?, bandwidth, seed, orthogonal)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|source| {
        Failure::Fetr(FetrError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<(), Failure> {
    let io = |source| {
        Failure::Fetr(FetrError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(out, "{header}").map_err(io)?;
    for r in rows {
        writeln!(out, "{r}").map_err(io)?;
    }
    out.flush().map_err(io)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_config(&a.hyper, FetrConfig::default(), a.w_solver)?;
    let (data, names) = load_manifest_with_names(&a.manifest)?;
    let data = apply_rff(data, a.rff.as_deref(), a.orthogonal, cfg.seed)?;
    let model = fit_fetr(&data, &cfg)?;
    let metrics = evaluate(model.weights.as_matrix(), &data, a.metric)?;
    let files = write_report(&model, Some(&metrics), Some(&names), &a.out)?;
    println!("{} {:.6e}", a.metric, metrics.aggregate);
    eprintln!(
        "{} outer iterations, converged: {}, report: {}",
        model.report.iterations,
        model.report.converged,
        files.report.display()
    );
    Ok(())
}

fn cv(a: CvArgs) -> CmdResult {
    let cfg = resolve_config(&a.hyper, FetrConfig::default(), a.w_solver)?;
    let grid = experiments::parse_eta_grid(&a.eta_grid)?;
    let (data, _) = load_manifest_with_names(&a.manifest)?;
    let data = apply_rff(data, a.rff.as_deref(), a.orthogonal, cfg.seed)?;
    let result = experiments::cross_validate(&data, &cfg, a.folds, &grid, a.metric, cfg.seed)?;
    if let Some(out) = &a.out {
        write_json(&result, out)?;
    }
    println!("{}", serde_json::to_string_pretty(&result).expect("serializable"));
    eprintln!(
        "best eta {:e}: {} {:.6e} +/- {:.6e}",
        result.best_eta, result.metric, result.best_mean, result.best_std
    );
    Ok(())
}

fn parse_grid(s: &str) -> Result<Vec<(usize, usize)>, Failure> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let [d, m] = parse_list::<2>(pair, "grid")?;
            Ok((as_count(d, "grid")?, as_count(m, "grid")?))
        })
        .collect()
}

fn bench(a: BenchArgs) -> CmdResult {
    let cfg = resolve_config(&a.hyper, synthetic_defaults(), None)?;
    let grid = parse_grid(&a.grid)?;
    if grid.is_empty() {
        return Err(Failure::Usage("--grid is empty".into()));
    }
    let points = experiments::bench_wsolvers(&BenchOptions {
        n: a.n,
        grid,
        repeats: a.repeats,
        seed: cfg.seed,
        eta: cfg.eta,
        l: cfg.l,
        u: cfg.u,
        closed_form_max_dim: cfg.closed_form_max_dim,
        gd: GdOptions {
            max_iters: cfg.gd_max_iters,
            rel_tol: cfg.gd_rel_tol,
        },
    })?;

    let cells = points.iter().flat_map(|p| &p.cells);
    write_lines(
        &with_suffix(&a.out, ".csv"),
        "d,m,solver,status,repeats,mean_seconds,var_seconds",
        cells.clone().map(|c| {
            let status = match c.status {
                BenchStatus::Ok => "ok",
                BenchStatus::Capacity => "capacity",
            };
            format!("{},{},{},{status},{},{:.9},{:.9e}", c.d, c.m, c.solver, c.samples.len(), c.mean_seconds, c.var_seconds)
        }),
    )?;
    write_lines(
        &with_suffix(&a.out, ".samples.csv"),
        "d,m,solver,repeat,seconds",
        cells.flat_map(|c| {
            c.samples
                .iter()
                .enumerate()
                .map(move |(i, s)| format!("{},{},{},{i},{s:.9}", c.d, c.m, c.solver))
        }),
    )?;
    write_lines(
        &with_suffix(&a.out, ".agreement.csv"),
        "d,m,max_rel_diff,agree",
        points.iter().map(|p| format!("{},{},{:.3e},{}", p.d, p.m, p.max_rel_diff, p.agree)),
    )?;

    for p in &points {
        let timings: Vec<String> = p
            .cells
            .iter()
            .map(|c| match c.status {
                BenchStatus::Ok => format!("{} {:.4}s", c.solver, c.mean_seconds),
                BenchStatus::Capacity => format!("{} skipped (capacity)", c.solver),
            })
            .collect();
        println!("d={} m={}: {} | max rel diff {:.1e}", p.d, p.m, timings.join(", "), p.max_rel_diff);
    }
    if let Some(p) = points.iter().find(|p| !p.agree) {
        return Err(Failure::Fetr(FetrError::Internal(format!(
            "solvers disagree at d={} m={}: relative difference {:.3e} exceeds {:.0e}",
            p.d,
            p.m,
            p.max_rel_diff,
            experiments::AGREEMENT_TOL
        ))));
    }
    Ok(())
}

fn compare(a: CompareArgs) -> CmdResult {
    let cfg = resolve_config(&a.hyper, synthetic_defaults(), a.w_solver)?;
    let data = match &a.manifest {
        Some(path) => load_manifest_with_names(path)?.0,
        None => {
            let [n, d, m] = parse_list::<3>(&a.synthetic, "synthetic")?;
            generate_synthetic(as_count(n, "synthetic")?, as_count(d, "synthetic")?, as_count(m, "synthetic")?, cfg.seed)?
        }
    };
    let result = experiments::compare(&data, &cfg, a.budget_seconds, a.fudge)?;
    for run in &result.methods {
        write_lines(
            &with_suffix(&a.out, &format!(".{}.csv", run.name)),
            COMPARE_TRACE_HEADER,
            experiments::compare_trace_rows(run, result.best_final),
        )?;
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        budget_seconds: f64,
        eta: f64,
        l: f64,
        u: f64,
        fudge: f64,
        target: f64,
        best_final: f64,
        methods: Vec<MethodSummary<'a>>,
    }
    #[derive(Serialize)]
    struct MethodSummary<'a> {
        name: &'a str,
        final_objective: f64,
        iterations: usize,
        evaluations: usize,
        seconds: f64,
        evals_to_target: Option<usize>,
        seconds_to_target: Option<f64>,
        events: &'a [String],
    }
    let summary = Summary {
        budget_seconds: result.budget_seconds,
        eta: result.eta,
        l: result.l,
        u: result.u,
        fudge: result.fudge,
        target: result.target,
        best_final: result.best_final,
        methods: result
            .methods
            .iter()
            .map(|m| MethodSummary {
                name: &m.name,
                final_objective: m.final_objective,
                iterations: m.iterations,
                evaluations: m.evaluations,
                seconds: m.seconds,
                evals_to_target: m.evals_to_target,
                seconds_to_target: m.seconds_to_target,
                events: &m.events,
            })
            .collect(),
    };
    write_json(&summary, &with_suffix(&a.out, ".summary.json"))?;
    for m in &result.methods {
        let reached = m
            .evals_to_target
            .map_or_else(|| "target not reached".to_string(), |e| format!("target after {e} evaluations"));
        println!(
            "{:<13} final {:.10e} in {:.2}s, {} evaluations, {reached}",
            m.name, m.final_objective, m.seconds, m.evaluations
        );
        for e in &m.events {
            println!("{:<13} event: {e}", "");
        }
    }
    Ok(())
}
