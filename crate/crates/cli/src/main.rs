//! `neuralsurv` command-line tool: synthesize data, fit, predict, evaluate
//! and self-test.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical failure, 4 fit finished
//! without converging (checkpoint still written).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use neuralsurv::cavi::SigmaStorage;
use neuralsurv::checkpoint::Checkpoint;
use neuralsurv::data::{gen_synthetic, load_csv, CsvSchema, Dataset, Features};
use neuralsurv::eval::{default_grid, evaluate, Metrics};
use neuralsurv::numkit::RngStream;
use neuralsurv::pipeline::{fit, FitConfig, FitError};
use neuralsurv::predict::{write_draws, write_summary_csv, PredictError};
use neuralsurv::{exec, selfcheck};

const SEED_ENV: &str = "NEURALSURV_SEED";
/// Nodes of the curve grid used to score a checkpoint.
const EVAL_CURVE_NODES: usize = 201;

#[derive(Parser)]
#[command(name = "neuralsurv", version, about = "Bayesian neural survival analysis")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every data-parallel map on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a two-group synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Fit the model and write a checkpoint.
    Fit(FitArgs),
    /// Posterior survival curves with credible bands per subject.
    Predict(PredictArgs),
    /// C-index and IPCW integrated Brier score on a dataset, as JSON.
    Eval(EvalArgs),
    /// Run the numerical self-checks and report observed values.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct CsvArgs {
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "event")]
    event_col: String,
    /// Comma-separated covariate columns, or "rest" for every other column.
    #[arg(long, default_value = "rest")]
    features: String,
}

impl CsvArgs {
    fn schema(&self) -> CsvSchema {
        let features = if self.features.trim() == "rest" {
            Features::Rest
        } else {
            Features::Named(self.features.split(',').map(|s| s.trim().to_string()).collect())
        };
        CsvSchema { time_col: self.time_col.clone(), event_col: self.event_col.clone(), features }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    /// TOML run configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Shared quadrature nodes.
    #[arg(long)]
    grid_size: Option<usize>,
    /// Hidden layer widths, e.g. 16,16.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    em_max_iter: Option<usize>,
    #[arg(long)]
    cavi_max_iter: Option<usize>,
    /// Relative tolerance of both EM and CAVI.
    #[arg(long)]
    tol: Option<f64>,
    /// Covariance storage: auto, dense or factor.
    #[arg(long, value_parser = parse_storage)]
    storage: Option<SigmaStorage>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the EM and CAVI traces as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    /// Explicit prediction times in original units, comma-separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "grid")]
    times: Option<Vec<f64>>,
    /// Number of equally spaced times from 0 to the training horizon.
    #[arg(long, default_value_t = 50)]
    grid: usize,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Summary CSV: subject,time,mean,median,lo,hi.
    #[arg(long)]
    out: PathBuf,
    /// Binary dump of every sampled curve.
    #[arg(long)]
    draws_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "constant_half")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    /// Points of the IBS time grid.
    #[arg(long, default_value_t = 100)]
    grid: usize,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Debug: score the constant S = 1/2 predictor instead of a checkpoint.
    #[arg(long)]
    constant_half: bool,
    /// Metrics JSON path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Test hook: negate the analytic Jacobian so the FD check must fail.
    #[arg(long, hide = true)]
    flip_jacobian_sign: bool,
}

fn parse_storage(s: &str) -> Result<SigmaStorage, String> {
    match s {
        "auto" => Ok(SigmaStorage::Auto),
        "dense" => Ok(SigmaStorage::Dense),
        "factor" => Ok(SigmaStorage::Factor),
        _ => Err(format!("unknown storage `{s}` (auto, dense, factor)")),
    }
}

#[derive(Debug)]
enum Failure {
    Input(anyhow::Error),
    Numerical(anyhow::Error),
    NotConverged(String),
}

impl Failure {
    fn input(e: impl Into<anyhow::Error>) -> Self {
        Failure::Input(e.into())
    }

    fn numerical(e: impl Into<anyhow::Error>) -> Self {
        Failure::Numerical(e.into())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::NotConverged(_) => 4,
        }
    }
}

impl From<FitError> for Failure {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Em(_) | FitError::Cavi(_) | FitError::Predict(_) => Failure::numerical(e),
            _ => Failure::input(e),
        }
    }
}

impl From<PredictError> for Failure {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::TooFewDraws { .. } | PredictError::Level(_) | PredictError::Times | PredictError::Io(_) => {
                Failure::input(e)
            }
            _ => Failure::numerical(e),
        }
    }
}

type Outcome = Result<(), Failure>;

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).with_context(|| format!("creating {}", path.display())).map_err(Failure::input)
}

fn load_data(path: &Path, csv: &CsvArgs) -> Result<Dataset, Failure> {
    load_csv(path, &csv.schema()).with_context(|| format!("reading {}", path.display())).map_err(Failure::input)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::read(path).map(|(_, c)| c).with_context(|| format!("reading {}", path.display())).map_err(Failure::input)
}

fn check_features(data: &Dataset, ckpt: &Checkpoint) -> Outcome {
    let want = ckpt.posterior.model.input_dim() - 1;
    if data.n_features() != want {
        return Err(Failure::Input(anyhow!("data have {} covariates, checkpoint expects {want}", data.n_features())));
    }
    Ok(())
}

fn linspace(hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| hi * k as f64 / (n - 1) as f64).collect()
}

fn cmd_synth(args: &SynthArgs) -> Outcome {
    let data = gen_synthetic(args.n, &mut RngStream::new(args.seed)).map_err(Failure::input)?;
    let mut w = create(&args.out)?;
    data.write_csv(&mut w).map_err(Failure::input)?;
    w.flush().map_err(Failure::input)?;
    log::info!("wrote {} subjects, censoring rate {:.3}", data.len(), data.censoring_rate());
    Ok(())
}

fn fit_config(args: &FitArgs) -> Result<FitConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::input)?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(Failure::input)?
        }
        None => FitConfig::default(),
    };
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.grid_size {
        config.grid_size = v;
    }
    if let Some(v) = &args.hidden {
        config.hidden.clone_from(v);
    }
    if let Some(v) = args.em_max_iter {
        config.em.max_iter = v;
    }
    if let Some(v) = args.cavi_max_iter {
        config.cavi.max_iter = v;
    }
    if let Some(v) = args.tol {
        config.em.rel_tol = v;
        config.cavi.rel_tol = v;
    }
    if let Some(v) = args.storage {
        config.cavi.storage = v;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct FitReport<'a> {
    config_hash: String,
    summary: &'a neuralsurv::pipeline::FitSummary,
    phi_map: f64,
    em_seconds: f64,
    cavi_seconds: f64,
}

#[derive(Serialize)]
struct Traces<'a> {
    em: &'a neuralsurv::EmTrace,
    cavi: &'a neuralsurv::CaviTrace,
}

fn cmd_fit(args: &FitArgs) -> Outcome {
    let config = fit_config(args)?;
    let data = load_data(&args.data, &args.csv)?;
    let res = fit(&data, &config)?;
    let ckpt = Checkpoint { config: config.clone(), posterior: res.posterior.clone(), summary: res.summary.clone() };
    ckpt.write(&args.out).with_context(|| format!("writing {}", args.out.display())).map_err(Failure::input)?;
    if let Some(path) = &args.trace {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &Traces { em: &res.em_trace, cavi: &res.cavi_trace }).map_err(Failure::input)?;
        w.flush().map_err(Failure::input)?;
    }
    let report = FitReport {
        config_hash: config.hash(),
        summary: &res.summary,
        phi_map: res.posterior.phi_map,
        em_seconds: res.em_seconds,
        cavi_seconds: res.cavi_seconds,
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(Failure::input)?);
    if !res.converged() {
        return Err(Failure::NotConverged(format!(
            "EM converged: {}, CAVI converged: {}; checkpoint written to {}",
            res.summary.em_converged,
            res.summary.cavi_converged,
            args.out.display()
        )));
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Outcome {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&args.data, &args.csv)?;
    check_features(&data, &ckpt)?;
    let times = match &args.times {
        Some(t) => t.clone(),
        None if args.grid >= 2 => linspace(ckpt.posterior.normalization.t_max, args.grid),
        None => return Err(Failure::Input(anyhow!("--grid needs at least 2 points"))),
    };
    let level = args.level.unwrap_or(ckpt.config.level);
    let draws = args.draws.unwrap_or(ckpt.config.draws);
    let seed = args.seed.unwrap_or(ckpt.config.seed);
    let preds = ckpt.posterior.predict(data.covariates(), &times, draws, seed)?;
    let mut w = create(&args.out)?;
    write_summary_csv(&mut w, &preds, level, 1.0)?;
    w.flush().map_err(Failure::input)?;
    if let Some(path) = &args.draws_out {
        let mut w = create(path)?;
        write_draws(&mut w, &preds, 1.0)?;
        w.flush().map_err(Failure::input)?;
    }
    log::info!("config {}: {} subjects x {} times", ckpt.config.hash(), preds.len(), times.len());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    predictor: &'static str,
    config_hash: Option<String>,
    draws: Option<usize>,
    seed: Option<u64>,
    #[serde(flatten)]
    metrics: Metrics,
}

fn cmd_eval(args: &EvalArgs) -> Outcome {
    let data = load_data(&args.data, &args.csv)?;
    let report = if args.constant_half {
        let grid = default_grid(data.times(), f64::INFINITY, args.grid);
        let metrics = evaluate(|_, _| 0.5, data.times(), data.events(), &grid).map_err(Failure::input)?;
        EvalReport { predictor: "constant_half", config_hash: None, draws: None, seed: None, metrics }
    } else {
        let path = args.checkpoint.as_ref().expect("clap requires a checkpoint");
        let ckpt = load_checkpoint(path)?;
        check_features(&data, &ckpt)?;
        let horizon = ckpt.posterior.normalization.t_max;
        let draws = args.draws.unwrap_or(ckpt.config.draws);
        let seed = args.seed.unwrap_or(ckpt.config.seed);
        let curves = ckpt.posterior.mean_curves(data.covariates(), &linspace(horizon, EVAL_CURVE_NODES), draws, seed)?;
        let grid = default_grid(data.times(), horizon, args.grid);
        let metrics = evaluate(|i, t| curves.at(i, t), data.times(), data.events(), &grid).map_err(Failure::input)?;
        EvalReport { predictor: "posterior_mean", config_hash: Some(ckpt.config.hash()), draws: Some(draws), seed: Some(seed), metrics }
    };
    let json = serde_json::to_string_pretty(&report).map_err(Failure::input)?;
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}").and_then(|_| w.flush()).map_err(Failure::input)?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_selftest(args: &SelftestArgs) -> Outcome {
    let opts = selfcheck::Options { seed: args.seed, flip_jacobian_sign: args.flip_jacobian_sign, ..Default::default() };
    let checks = selfcheck::run_all(&opts);
    for c in &checks {
        println!(
            "{} {:<58} observed {:>12.4e}  tolerance {:>10.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.observed,
            c.tolerance
        );
    }
    if let Some(path) = &args.json {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &checks).map_err(Failure::input)?;
        w.flush().map_err(Failure::input)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(Failure::Numerical(anyhow!("{failed} self-checks failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if !exec::init_threads(n) {
            log::warn!("--threads {n} ignored: worker pool unavailable or already built");
        }
    }
    exec::set_sequential(cli.sequential);
    let outcome = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Input(e) => eprintln!("input error: {e:#}"),
                Failure::Numerical(e) => eprintln!("numerical failure: {e:#}"),
                Failure::NotConverged(msg) => eprintln!("not converged: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
