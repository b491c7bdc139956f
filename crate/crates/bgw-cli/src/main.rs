//! Command-line front end for the `bgw` library.
//!
//! Subcommands cover the exact recursion (`recurse`), brute-force
//! enumeration checks (`oracle`), Markov-chain sampling (`mcmc`), the
//! closed-form critical coupling (`critline`, `scan`), the critical decay
//! experiment (`scaling`), the supercritical growth constant (`rho`),
//! standalone least-squares fits (`fit`), and a cross-module consistency
//! battery (`check`).
//!
//! Every run resolves its settings from an optional JSON config file
//! (`--config`) overlaid with explicit flags (flags win), and echoes the
//! full effective configuration into the output header, together with the
//! tool version, seed, and RNG name.  Re-running with the echoed config
//! reproduces the output byte for byte (with `--threads 1`, and by default
//! for every subcommand whose result is independent of thread count).
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, bad config,
//! bad input files), 2 on numerical failures (overflow, non-convergence,
//! failed consistency checks).
//!
//! If the environment variable `BGW_OUTPUT_DIR` is set, relative `--output`
//! paths are taken relative to it.

use std::env;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use bgw::mcmc::{
    merge_runs, run_chain, run_chain_series, ChainConfig, ChainKind, ChainStats, GENERATOR_NAME,
};
use bgw::oracle::{self, ExactMeasure, ObservableClass};
use bgw::phase::{
    beta_c, critical_scaling, empirical_criticality, fit_series, fixed_point, loglog_u_series,
    rho, rho_sweep, scan_surface, FitModel, FitResult, SurfaceEntry,
};
use bgw::recursion::{f_map, observables, Blocks, LogRecursion, Recursion};
use bgw::{Interaction, ModelParams, OffspringDist, Tree};

const VERSION: &str = env!("CARGO_PKG_VERSION");

// ───────────────────────────── CLI surface ─────────────────────────────

#[derive(Parser)]
#[command(
    name = "bgw",
    version,
    about = "Branching trees with a first-ancestor pair interaction: \
             recursions, enumeration oracles, samplers, and phase-line tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Iterate the two-variable recursion and print the trajectory
    /// with the selected derivative blocks and derived observables.
    Recurse(RecurseArgs),
    /// Exact finite-depth answers by enumeration: measure summary or a
    /// randomized correlation-inequality suite.
    Oracle(OracleArgs),
    /// Run a Metropolis chain (local or global) and report estimates.
    Mcmc(McmcArgs),
    /// Closed-form critical coupling for one (p0, p2) point.
    Critline(CritlineArgs),
    /// Closed-form critical coupling on a (p0, p2) grid.
    Scan(ScanArgs),
    /// Mean frontier decay at the critical coupling, with power-law fit.
    Scaling(ScalingArgs),
    /// Supercritical growth constant: sweeps, bounds, crossover diagnostic.
    Rho(RhoArgs),
    /// Least-squares fit (power-law, offset-decay, or log-linear) on CSV columns.
    Fit(FitArgs),
    /// Cross-module consistency battery; exits 0 only if every check passes.
    Check(CheckArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// JSON config file; explicit flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Offspring probabilities "p0,p1,...,pK" (K = len-1 ≥ 2).
    #[arg(long, value_name = "P0,P1,..", allow_hyphen_values = true)]
    p: Option<String>,
    /// Pair coupling b = e^beta (mutually exclusive with --beta).
    #[arg(long)]
    b: Option<f64>,
    /// Inverse-temperature coupling beta (mutually exclusive with --b).
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    /// Boundary offspring value x of the root's virtual parent.
    #[arg(long)]
    x: Option<u8>,
    /// RNG seed (ChaCha12; chains use one stream per chain).
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (default stdout). Relative paths honor BGW_OUTPUT_DIR.
    #[arg(long, short = 'o', value_name = "FILE")]
    output: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads (1 guarantees bit-reproducibility; default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn as_str(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Args)]
struct RecurseArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of iteration steps (states 0..=n are printed).
    #[arg(long)]
    n: Option<usize>,
    /// Derivative blocks: "all", "none", or a comma list of
    /// leaves,energy,variance.
    #[arg(long)]
    blocks: Option<String>,
    /// Iterate in log space (supercritical growth; needs b ≥ 1).
    #[arg(long)]
    log: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Interaction depth n (offspring assigned for generations 0..=n).
    #[arg(long)]
    n: Option<usize>,
    /// What to compute.
    #[arg(long, value_enum)]
    mode: Option<OracleMode>,
    /// Observable class for the inequality suite.
    #[arg(long, value_enum)]
    class: Option<SuiteClass>,
    /// Random observable pairs per inequality run.
    #[arg(long)]
    trials: Option<u64>,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, ValueEnum)]
enum OracleMode {
    /// Partition value and exact means/variances of the frontier counts.
    Summary,
    /// Randomized correlation-inequality suite (minimum covariance).
    Suite,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, ValueEnum)]
enum SuiteClass {
    Cone,
    Monotone,
}

#[derive(Args)]
struct McmcArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Interaction depth n.
    #[arg(long)]
    n: Option<usize>,
    /// Chain kind.
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Steps per chain.
    #[arg(long)]
    steps: Option<u64>,
    /// Record observables every this many steps.
    #[arg(long)]
    thinning: Option<u64>,
    /// Generation weights "w0,w1,..,wn" for the local proposal
    /// (default: uniform).
    #[arg(long, value_name = "W0,W1,..")]
    lambda: Option<String>,
    /// Divide offspring-draw probabilities by max p_k (local chain).
    #[arg(long)]
    accelerated: bool,
    /// Independent chains (streams base..base+chains-1), merged at the end.
    #[arg(long)]
    chains: Option<u64>,
    /// Base RNG stream.
    #[arg(long)]
    stream: Option<u64>,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, ValueEnum)]
enum KindArg {
    Local,
    Global,
}

#[derive(Args)]
struct CritlineArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Probability of zero offspring.
    #[arg(long)]
    p0: Option<f64>,
    /// Probability of two offspring.
    #[arg(long)]
    p2: Option<f64>,
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    p0_min: Option<f64>,
    #[arg(long)]
    p0_max: Option<f64>,
    #[arg(long)]
    p2_min: Option<f64>,
    #[arg(long)]
    p2_max: Option<f64>,
    /// Grid points per axis (inclusive endpoints).
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args)]
struct ScalingArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Largest depth; the fit window is the top decade [n_max/10, n_max].
    #[arg(long)]
    n_max: Option<usize>,
}

#[derive(Args)]
struct RhoArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Single-offspring probability of the law (0, p1, 1-p1).
    #[arg(long)]
    p1: Option<f64>,
    /// Sweep start (used when --b is absent).
    #[arg(long)]
    b_min: Option<f64>,
    /// Sweep end, inclusive.
    #[arg(long)]
    b_max: Option<f64>,
    /// Sweep step.
    #[arg(long)]
    b_step: Option<f64>,
    /// Relative convergence tolerance for the growth sequence.
    #[arg(long)]
    tol: Option<f64>,
    /// Emit the crossover diagnostic y_n = log(log u_n)/n instead of the
    /// growth-constant sweep (single coupling --b).
    #[arg(long)]
    crossover: bool,
    /// Largest n of the crossover series.
    #[arg(long)]
    n_max: Option<usize>,
    /// Early fit window "lo:hi" of the crossover series.
    #[arg(long, value_name = "LO:HI")]
    window_early: Option<String>,
    /// Late fit window "lo:hi" of the crossover series.
    #[arg(long, value_name = "LO:HI")]
    window_late: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input CSV ('#' comment lines are skipped; header row required).
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    /// Fit model.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Abscissa column name (default: first column).
    #[arg(long)]
    x_col: Option<String>,
    /// Ordinate column name (default: second column).
    #[arg(long)]
    y_col: Option<String>,
    /// Restrict to abscissas in "lo:hi" (default: all rows).
    #[arg(long, value_name = "LO:HI")]
    window: Option<String>,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, ValueEnum)]
enum ModelArg {
    /// y = c0 · x^c1
    Powerlaw,
    /// y = c0 − c1/x
    GammaDelta,
    /// y = c0 + c1·log(x−1)
    LogLinear,
}

impl ModelArg {
    fn to_model(self) -> FitModel {
        match self {
            ModelArg::Powerlaw => FitModel::PowerLaw,
            ModelArg::GammaDelta => FitModel::GammaDelta,
            ModelArg::LogLinear => FitModel::LogLinear,
        }
    }
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: CommonArgs,
}

// ─────────────────────────── file config ───────────────────────────

/// JSON config file contents.  Every key mirrors a flag; unknown keys are
/// rejected with a diagnostic.  Flags override file values.
#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    subcommand: Option<String>,
    p: Option<Vec<f64>>,
    b: Option<f64>,
    beta: Option<f64>,
    x: Option<u8>,
    seed: Option<u64>,
    output: Option<String>,
    format: Option<String>,
    threads: Option<usize>,
    n: Option<usize>,
    blocks: Option<String>,
    log: Option<bool>,
    mode: Option<String>,
    class: Option<String>,
    trials: Option<u64>,
    kind: Option<String>,
    steps: Option<u64>,
    thinning: Option<u64>,
    lambda: Option<Vec<f64>>,
    accelerated: Option<bool>,
    chains: Option<u64>,
    stream: Option<u64>,
    p0: Option<f64>,
    p2: Option<f64>,
    p0_min: Option<f64>,
    p0_max: Option<f64>,
    p2_min: Option<f64>,
    p2_max: Option<f64>,
    grid: Option<usize>,
    n_max: Option<usize>,
    p1: Option<f64>,
    b_min: Option<f64>,
    b_max: Option<f64>,
    b_step: Option<f64>,
    b_values: Option<Vec<f64>>,
    tol: Option<f64>,
    crossover: Option<bool>,
    window_early: Option<String>,
    window_late: Option<String>,
    input: Option<String>,
    model: Option<String>,
    x_col: Option<String>,
    y_col: Option<String>,
    window: Option<String>,
}

fn load_config(path: &Option<PathBuf>, subcommand: &str) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let cfg: FileConfig = serde_json::from_str(&text)
        .with_context(|| format!("malformed config file {}", path.display()))?;
    if let Some(sub) = &cfg.subcommand {
        if sub != subcommand {
            bail!(
                "config file {} is for subcommand `{}`, but `{}` was invoked",
                path.display(),
                sub,
                subcommand
            );
        }
    }
    Ok(cfg)
}

/// Flag value wins over file value.
fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| file.clone())
}

// ─────────────────────────── resolution helpers ───────────────────────────

fn parse_f64_list(text: &str, what: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .with_context(|| format!("cannot parse {what} entry {tok:?} as a number"))
        })
        .collect()
}

fn parse_window(text: &str) -> anyhow::Result<(f64, f64)> {
    let mut it = text.split(':');
    let (Some(lo), Some(hi), None) = (it.next(), it.next(), it.next()) else {
        bail!("window must look like \"lo:hi\", got {text:?}");
    };
    let lo: f64 = lo.trim().parse().context("window low endpoint")?;
    let hi: f64 = hi.trim().parse().context("window high endpoint")?;
    if !(lo < hi) {
        bail!("window low endpoint {lo} must be below high endpoint {hi}");
    }
    Ok((lo, hi))
}

fn parse_blocks(text: &str) -> anyhow::Result<Blocks> {
    match text.trim() {
        "all" => return Ok(Blocks::all()),
        "none" => return Ok(Blocks::none()),
        _ => {}
    }
    let mut blocks = Blocks::none();
    for tok in text.split(',') {
        match tok.trim() {
            "leaves" => blocks.leaves = true,
            "energy" => blocks.energy = true,
            "variance" => blocks.variance = true,
            other => bail!(
                "unknown block {other:?}; expected \"all\", \"none\", or a comma \
                 list of leaves,energy,variance"
            ),
        }
    }
    Ok(blocks)
}

/// Effective model settings shared by most subcommands.
struct ModelSpec {
    dist: OffspringDist,
    b: f64,
    x: u8,
    probs: Vec<f64>,
}

fn resolve_model(common: &CommonArgs, file: &FileConfig) -> anyhow::Result<ModelSpec> {
    let probs = match (&common.p, &file.p) {
        (Some(text), _) => parse_f64_list(text, "probability")?,
        (None, Some(v)) => v.clone(),
        (None, None) => vec![0.4, 0.3, 0.3],
    };
    let dist = OffspringDist::new(probs.clone())?;
    let b = resolve_coupling(common, file)?;
    let x = pick(&common.x, &file.x).unwrap_or(1);
    Ok(ModelSpec { dist, b, x, probs })
}

fn resolve_coupling(common: &CommonArgs, file: &FileConfig) -> anyhow::Result<f64> {
    if common.b.is_some() && common.beta.is_some() {
        return Err(anyhow!(bgw::Error::InvalidParams(
            "--b and --beta are mutually exclusive (b = e^beta)".into()
        )));
    }
    if let Some(b) = common.b {
        return Ok(b);
    }
    if let Some(beta) = common.beta {
        return Ok(beta.exp());
    }
    match (file.b, file.beta) {
        (Some(_), Some(_)) => Err(anyhow!(bgw::Error::InvalidParams(
            "config file sets both b and beta; they are mutually exclusive".into()
        ))),
        (Some(b), None) => Ok(b),
        (None, Some(beta)) => Ok(beta.exp()),
        (None, None) => Ok(1.0),
    }
}

fn resolve_threads(common: &CommonArgs, file: &FileConfig) -> usize {
    pick(&common.threads, &file.threads).unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

fn resolve_output(common: &CommonArgs, file: &FileConfig) -> Option<PathBuf> {
    let path = common
        .output
        .clone()
        .or_else(|| file.output.as_ref().map(PathBuf::from))?;
    if path.is_absolute() {
        return Some(path);
    }
    match env::var_os("BGW_OUTPUT_DIR") {
        Some(dir) => Some(PathBuf::from(dir).join(path)),
        None => Some(path),
    }
}

fn resolve_format(common: &CommonArgs, file: &FileConfig) -> anyhow::Result<Format> {
    if let Some(f) = common.format {
        return Ok(f);
    }
    match file.format.as_deref() {
        None => Ok(Format::Csv),
        Some("csv") => Ok(Format::Csv),
        Some("json") => Ok(Format::Json),
        Some(other) => bail!("unknown format {other:?} in config file (expected csv or json)"),
    }
}

// ───────────────────────────── output sink ─────────────────────────────

/// Accumulates the whole output, then writes it once — to the resolved
/// file, or to stdout.  Buffering keeps partial results available when a
/// command fails halfway (the buffer is still flushed).
struct Sink {
    buf: String,
    target: Option<PathBuf>,
}

impl Sink {
    fn new() -> Self {
        Sink {
            buf: String::new(),
            target: None,
        }
    }

    fn line(&mut self, text: &str) {
        self.buf.push_str(text);
        self.buf.push('\n');
    }

    fn flush(&self) -> anyhow::Result<()> {
        if self.buf.is_empty() {
            return Ok(());
        }
        match &self.target {
            Some(path) => fs::write(path, &self.buf)
                .with_context(|| format!("cannot write output file {}", path.display())),
            None => {
                io::stdout()
                    .write_all(self.buf.as_bytes())
                    .context("cannot write to stdout")
            }
        }
    }
}

/// 17 significant digits, enough to round-trip any f64.
fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt17(x: Option<f64>) -> String {
    x.map(f17).unwrap_or_default()
}

/// Standard header: version, effective config, seed, generator.
fn header(sink: &mut Sink, config: &Value, seed: u64) {
    sink.line(&format!("# bgw {VERSION}"));
    sink.line(&format!(
        "# config: {}",
        serde_json::to_string(config).expect("config serializes")
    ));
    sink.line(&format!("# seed: {seed}"));
    sink.line(&format!("# generator: {GENERATOR_NAME}"));
}

/// JSON envelope mirroring the CSV header.
fn json_envelope(config: &Value, seed: u64, result: Value) -> String {
    let doc = json!({
        "version": VERSION,
        "config": config,
        "seed": seed,
        "generator": GENERATOR_NAME,
        "result": result,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("envelope serializes");
    text.push('\n');
    text
}

fn output_value(path: &Option<PathBuf>) -> Value {
    match path {
        Some(p) => Value::String(p.display().to_string()),
        None => Value::Null,
    }
}

// ───────────────────────────── dispatch ─────────────────────────────

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and --version are not errors; real parse errors are
            // validation failures and must exit 1, not clap's default 2
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            process::exit(code);
        }
    };
    let mut sink = Sink::new();
    let result = dispatch(cli, &mut sink);
    if let Err(e) = sink.flush() {
        eprintln!("error: {e:#}");
        process::exit(1);
    }
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        let code = match e.downcast_ref::<bgw::Error>() {
            Some(lib) if !lib.is_validation() => 2,
            _ => 1,
        };
        process::exit(code);
    }
}

fn dispatch(cli: Cli, sink: &mut Sink) -> anyhow::Result<()> {
    match cli.command {
        Command::Recurse(args) => cmd_recurse(args, sink),
        Command::Oracle(args) => cmd_oracle(args, sink),
        Command::Mcmc(args) => cmd_mcmc(args, sink),
        Command::Critline(args) => cmd_critline(args, sink),
        Command::Scan(args) => cmd_scan(args, sink),
        Command::Scaling(args) => cmd_scaling(args, sink),
        Command::Rho(args) => cmd_rho(args, sink),
        Command::Fit(args) => cmd_fit(args, sink),
        Command::Check(args) => cmd_check(args, sink),
    }
}

// ───────────────────────────── recurse ─────────────────────────────

const RECURSE_COLUMNS: &str = "du_du,dv_du,du_dv,dv_dv,du_db,dv_db,d2u_db2,d2v_db2,\
                               meanL,meanQ,meanN,meanN22,varN22,psi";

fn cmd_recurse(args: RecurseArgs, sink: &mut Sink) -> anyhow::Result<()> {
    let file = load_config(&args.common.config, "recurse")?;
    let spec = resolve_model(&args.common, &file)?;
    let n = pick(&args.n, &file.n).unwrap_or(30);
    let blocks_text = pick(&args.blocks, &file.blocks).unwrap_or_else(|| "all".into());
    let blocks = parse_blocks(&blocks_text)?;
    let log = args.log || file.log.unwrap_or(false);
    let seed = pick(&args.common.seed, &file.seed).unwrap_or(0);
    let format = resolve_format(&args.common, &file)?;
    sink.target = resolve_output(&args.common, &file);

    let config = json!({
        "subcommand": "recurse",
        "p": spec.probs,
        "b": spec.b,
        "x": spec.x,
        "n": n,
        "blocks": blocks_text,
        "log": log,
        "seed": seed,
        "format": format.as_str(),
        "output": output_value(&sink.target),
    });

    if log {
        run_recurse_log(&spec, n, blocks, &config, seed, format, sink)
    } else {
        run_recurse_linear(&spec, n, blocks, &config, seed, format, sink)
    }
}

fn run_recurse_linear(
    spec: &ModelSpec,
    n: usize,
    blocks: Blocks,
    config: &Value,
    seed: u64,
    format: Format,
    sink: &mut Sink,
) -> anyhow::Result<()> {
    let k = spec.dist.k_max();
    let mut rec = Recursion::new(&spec.dist, spec.b, blocks)?;
    let mut rows: Vec<Value> = Vec::new();
    let mut error = None;
    for step in 0..=n {
        if step > 0 {
            if let Err(e) = rec.advance() {
                error = Some(e);
                break;
            }
        }
        let st = *rec.state();
        let d = st.d_uv;
        let db = st.d_b;
        let dbb = st.d_bb;
        match format {
            Format::Csv => {
                let fields = [
                    st.n.to_string(),
                    f17(st.u),
                    f17(st.v),
                    opt17(d.map(|d| d[0])),
                    opt17(d.map(|d| d[1])),
                    opt17(d.map(|d| d[2])),
                    opt17(d.map(|d| d[3])),
                    opt17(db.map(|d| d[0])),
                    opt17(db.map(|d| d[1])),
                    opt17(dbb.map(|d| d[0])),
                    opt17(dbb.map(|d| d[1])),
                    opt17(st.mean_l(spec.x)),
                    opt17(st.mean_q(spec.x)),
                    opt17(st.mean_n(spec.x)),
                    opt17(st.mean_n22(spec.x, spec.b)),
                    opt17(st.var_n22(spec.x, spec.b)),
                    opt17(st.psi(spec.x, k)),
                ];
                rows.push(Value::String(fields.join(",")));
            }
            Format::Json => rows.push(json!({
                "n": st.n,
                "u": st.u,
                "v": st.v,
                "d_uv": d,
                "d_b": db,
                "d_bb": dbb,
                "meanL": st.mean_l(spec.x),
                "meanQ": st.mean_q(spec.x),
                "meanN": st.mean_n(spec.x),
                "meanN22": st.mean_n22(spec.x, spec.b),
                "varN22": st.var_n22(spec.x, spec.b),
                "psi": st.psi(spec.x, k),
            })),
        }
    }
    let note = error.as_ref().map(|e| format!("aborted: {e}"));
    emit_recurse(
        sink,
        config,
        seed,
        format,
        &format!("n,u,v,{RECURSE_COLUMNS}"),
        rows,
        note.as_deref(),
    );
    match error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn run_recurse_log(
    spec: &ModelSpec,
    n: usize,
    blocks: Blocks,
    config: &Value,
    seed: u64,
    format: Format,
    sink: &mut Sink,
) -> anyhow::Result<()> {
    let k = spec.dist.k_max();
    let mut lr = LogRecursion::new(&spec.dist, spec.b)?;
    if blocks.energy {
        lr = lr.with_b_derivative();
    }
    let mut rows: Vec<Value> = Vec::new();
    let mut error = None;
    for step in 0..=n {
        if step > 0 {
            if let Err(e) = lr.advance() {
                error = Some(e);
                break;
            }
        }
        let st = lr.state().clone();
        let row_db = if spec.x == 1 { st.dlogu_db } else { st.dlogv_db };
        let mean_n22 = row_db.map(|d| spec.b * d);
        let psi = log_psi(&st, spec.x, k);
        let (u, v) = (finite_exp(st.lu), finite_exp(st.lv));
        match format {
            Format::Csv => {
                let mut fields = vec![st.n.to_string(), f17(st.lu), f17(st.lv)];
                fields.extend([opt17(u), opt17(v)]);
                fields.extend(std::iter::repeat_n(String::new(), 8));
                fields.extend([
                    String::new(),
                    String::new(),
                    String::new(),
                    opt17(mean_n22),
                    String::new(),
                    opt17(psi),
                ]);
                rows.push(Value::String(fields.join(",")));
            }
            Format::Json => rows.push(json!({
                "n": st.n,
                "Lu": st.lu,
                "Lv": st.lv,
                "u": u,
                "v": v,
                "meanN22": mean_n22,
                "psi": psi,
            })),
        }
    }
    let note = error.as_ref().map(|e| match e {
        bgw::Error::Overflow { last_step } => format!(
            "aborted: the log-space values themselves left the f64 range at step {}; \
             growth at this coupling is doubly exponential",
            last_step + 1
        ),
        other => format!("aborted: {other}"),
    });
    emit_recurse(
        sink,
        config,
        seed,
        format,
        &format!("n,Lu,Lv,u,v,{RECURSE_COLUMNS}"),
        rows,
        note.as_deref(),
    );
    match error {
        Some(bgw::Error::Overflow { last_step }) => {
            Err(anyhow::Error::new(bgw::Error::Overflow { last_step }).context(
                "the log-space iteration itself overflowed; \
                 growth at this coupling is doubly exponential",
            ))
        }
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn emit_recurse(
    sink: &mut Sink,
    config: &Value,
    seed: u64,
    format: Format,
    csv_header: &str,
    rows: Vec<Value>,
    abort_note: Option<&str>,
) {
    match format {
        Format::Csv => {
            header(sink, config, seed);
            sink.line(csv_header);
            for row in rows {
                if let Value::String(s) = row {
                    sink.line(&s);
                }
            }
            if let Some(note) = abort_note {
                sink.line(&format!("# {note}"));
            }
        }
        Format::Json => {
            if abort_note.is_none() {
                sink.buf = json_envelope(config, seed, json!({ "trajectory": rows }));
            }
        }
    }
}

fn finite_exp(l: f64) -> Option<f64> {
    let x = l.exp();
    x.is_finite().then_some(x)
}

/// Free energy per site from a log-space state: `-L_row / |Λ_{n-1}|`,
/// computed in logs once the lattice size leaves the f64 range.
fn log_psi(st: &bgw::recursion::LogRecState, x: u8, k_max: u8) -> Option<f64> {
    if st.n == 0 {
        return None;
    }
    let row = if x == 1 { st.lu } else { st.lv };
    let k = k_max as f64;
    let lam = (k.powi(st.n as i32) - 1.0) / (k - 1.0);
    if lam.is_finite() {
        return Some(-row / lam);
    }
    if row == 0.0 {
        return Some(0.0);
    }
    let ln_lam = st.n as f64 * k.ln() - (k - 1.0).ln();
    Some(-row.signum() * (row.abs().ln() - ln_lam).exp())
}

// ───────────────────────────── oracle ─────────────────────────────

fn cmd_oracle(args: OracleArgs, sink: &mut Sink) -> anyhow::Result<()> {
    let file = load_config(&args.common.config, "oracle")?;
    let spec = resolve_model(&args.common, &file)?;
    let n = pick(&args.n, &file.n).unwrap_or(2);
    let seed = pick(&args.common.seed, &file.seed).unwrap_or(0);
    let format = resolve_format(&args.common, &file)?;
    let mode = match (args.mode, file.mode.as_deref()) {
        (Some(m), _) => m,
        (None, Some("summary")) => OracleMode::Summary,
        (None, Some("suite")) => OracleMode::Suite,
        (None, Some(other)) => bail!("unknown oracle mode {other:?} in config file"),
        (None, None) => OracleMode::Summary,
    };
    let class = match (args.class, file.class.as_deref()) {
        (Some(c), _) => c,
        (None, Some("cone")) => SuiteClass::Cone,
        (None, Some("monotone")) => SuiteClass::Monotone,
        (None, Some(other)) => bail!("unknown observable class {other:?} in config file"),
        (None, None) => SuiteClass::Monotone,
    };
    let trials = pick(&args.trials, &file.trials).unwrap_or(200);
    sink.target = resolve_output(&args.common, &file);

    let params = ModelParams::new(
        spec.dist.clone(),
        Interaction::two_class_from_b(spec.dist.k_max(), spec.b)?,
        spec.x,
        n,
    )?;

    let mode_str = match mode {
        OracleMode::Summary => "summary",
        OracleMode::Suite => "suite",
    };
    let class_str = match class {
        SuiteClass::Cone => "cone",
        SuiteClass::Monotone => "monotone",
    };
    let mut config = json!({
        "subcommand": "oracle",
        "p": spec.probs,
        "b": spec.b,
        "x": spec.x,
        "n": n,
        "mode": mode_str,
        "seed": seed,
        "format": format.as_str(),
        "output": output_value(&sink.target),
    });
    if mode == OracleMode::Suite {
        config["class"] = json!(class_str);
        config["trials"] = json!(trials);
    }

    match mode {
        OracleMode::Summary => {
            let measure = ExactMeasure::new(params)?;
            let mean_l = measure.expectation(|t| t.frontier_counts().0 as f64);
            let mean_q = measure.expectation(|t| t.frontier_counts().1 as f64);
            let n22 = |t: &Tree| t.favoured_links(spec.x) as f64;
            let summary = json!({
                "trees": measure.len(),
                "partition": measure.partition(),
                "meanL": mean_l,
                "meanQ": mean_q,
                "meanN": mean_l + mean_q,
                "meanN22": measure.expectation(n22),
                "varN22": measure.covariance(n22, n22),
            });
            match format {
                Format::Csv => {
                    header(sink, &config, seed);
                    sink.line("trees,partition,meanL,meanQ,meanN,meanN22,varN22");
                    sink.line(&format!(
                        "{},{},{},{},{},{},{}",
                        summary["trees"],
                        f17(measure.partition()),
                        f17(mean_l),
                        f17(mean_q),
                        f17(mean_l + mean_q),
                        f17(measure.expectation(n22)),
                        f17(measure.covariance(n22, n22)),
                    ));
                }
                Format::Json => sink.buf = json_envelope(&config, seed, summary),
            }
        }
        OracleMode::Suite => {
            let oc = match class {
                SuiteClass::Cone => ObservableClass::Cone,
                SuiteClass::Monotone => ObservableClass::Monotone,
            };
            let report = oracle::inequality_suite(&params, oc, trials, seed)?;
            match format {
                Format::Csv => {
                    header(sink, &config, seed);
                    sink.line("class,trials,seed,min_covariance,pass");
                    sink.line(&format!(
                        "{class_str},{},{},{},{}",
                        report.trials,
                        report.seed,
                        f17(report.min_covariance),
                        report.pass
                    ));
                }
                Format::Json => {
                    sink.buf = json_envelope(&config, seed, serde_json::to_value(&report)?)
                }
            }
            if !report.pass {
                return Err(anyhow!(bgw::Error::Numerical(format!(
                    "inequality suite failed: minimum covariance {:.3e} below -1e-12",
                    report.min_covariance
                ))));
            }
        }
    }
    Ok(())
}

// ───────────────────────────── mcmc ─────────────────────────────

fn cmd_mcmc(args: McmcArgs, sink: &mut Sink) -> anyhow::Result<()> {
    let file = load_config(&args.common.config, "mcmc")?;
    let spec = resolve_model(&args.common, &file)?;
    let n = pick(&args.n, &file.n).unwrap_or(2);
    let seed = pick(&args.common.seed, &file.seed).unwrap_or(1);
    let format = resolve_format(&args.common, &file)?;
    let kind = match (args.kind, file.kind.as_deref()) {
        (Some(k), _) => k,
        (None, Some("local")) => KindArg::Local,
        (None, Some("global")) => KindArg::Global,
        (None, Some(other)) => bail!("unknown chain kind {other:?} in config file"),
        (None, None) => KindArg::Local,
    };
    let steps = pick(&args.steps, &file.steps).unwrap_or(100_000);
    let thinning = pick(&args.thinning, &file.thinning).unwrap_or(100);
    let lambda = match (&args.lambda, &file.lambda) {
        (Some(text), _) => parse_f64_list(text, "lambda")?,
        (None, Some(v)) => v.clone(),
        (None, None) => vec![1.0 / (n as f64 + 1.0); n + 1],
    };
    let accelerated = args.accelerated || file.accelerated.unwrap_or(false);
    let chains = pick(&args.chains, &file.chains).unwrap_or(1).max(1);
    let stream = pick(&args.stream, &file.stream).unwrap_or(0);
    let threads = resolve_threads(&args.common, &file);
    sink.target = resolve_output(&args.common, &file);

    let kind_str = match kind {
        KindArg::Local => "local",
        KindArg::Global => "global",
    };
    let config = json!({
        "subcommand": "mcmc",
        "p": spec.probs,
        "b": spec.b,
        "x": spec.x,
        "n": n,
        "kind": kind_str,
        "steps": steps,
        "thinning": thinning,
        "lambda": lambda,
        "accelerated": accelerated,
        "chains": chains,
        "stream": stream,
        "seed": seed,
        "threads": threads,
        "format": format.as_str(),
        "output": output_value(&sink.target),
    });

    let params = ModelParams::new(
        spec.dist.clone(),
        Interaction::two_class_from_b(spec.dist.k_max(), spec.b)?,
        spec.x,
        n,
    )?;
    let boundary = spec.x;
    let observables: Vec<(String, Box<dyn Fn(&Tree) -> f64 + Send + Sync>)> = vec![
        (
            "n22".into(),
            Box::new(move |t: &Tree| t.favoured_links(boundary) as f64),
        ),
        (
            "frontier".into(),
            Box::new(|t: &Tree| {
                let (l, q) = t.frontier_counts();
                (l + q) as f64
            }),
        ),
    ];

    let chain_config = |stream_id: u64| ChainConfig {
        params: params.clone(),
        kind: match kind {
            KindArg::Local => ChainKind::Local,
            KindArg::Global => ChainKind::Global,
        },
        lambda: lambda.clone(),
        steps,
        seed,
        stream: stream_id,
        thinning,
        accelerated,
    };

    let configs: Vec<ChainConfig> = (0..chains).map(|i| chain_config(stream + i)).collect();
    let mut runs: Vec<(ChainStats, Vec<Vec<f64>>)> = Vec::with_capacity(configs.len());
    if threads <= 1 || configs.len() == 1 {
        for cfg in &configs {
            runs.push(run_chain_series(cfg, &observables)?);
        }
    } else {
        let obs_ref = &observables;
        for batch in configs.chunks(threads) {
            let batch_runs = std::thread::scope(|scope| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|cfg| scope.spawn(move || run_chain_series(cfg, obs_ref)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("chain thread panicked"))
                    .collect::<bgw::Result<Vec<_>>>()
            })?;
            runs.extend(batch_runs);
        }
    }

    let stats: Vec<ChainStats> = runs.iter().map(|(s, _)| s.clone()).collect();
    let merged = if stats.len() == 1 {
        stats[0].clone()
    } else {
        merge_runs(&stats)?
    };

    match format {
        Format::Csv => {
            header(sink, &config, seed);
            sink.line("step,observable,value");
            if runs.len() == 1 {
                let series = &runs[0].1;
                let count = series.first().map_or(0, Vec::len);
                for j in 0..count {
                    let step = (j as u64 + 1) * thinning;
                    for ((name, _), samples) in observables.iter().zip(series) {
                        sink.line(&format!("{step},{name},{}", f17(samples[j])));
                    }
                }
            } else {
                sink.line("# per-step series omitted for multi-chain runs; see summary");
            }
            sink.line(&format!(
                "# summary: {}",
                serde_json::to_string(&merged).expect("stats serialize")
            ));
        }
        Format::Json => {
            sink.buf = json_envelope(
                &config,
                seed,
                json!({ "chains": stats, "merged": merged }),
            );
        }
    }
    Ok(())
}

// ───────────────────────────── critline / scan ─────────────────────────────

fn cmd_critline(args: CritlineArgs, sink: &mut Sink) -> anyhow::Result<()> {
    let file = load_config(&args.common.config, "critline")?;
    let p0 = pick(&args.p0, &file.p0).unwrap_or(0.4);
    let p2 = pick(&args.p2, &file.p2).unwrap_or(0.3);
    let seed = pick(&args.common.seed, &file.seed).unwrap_or(0);
    let format = resolve_format(&args.common, &file)?;
    sink.target = resolve_output(&args.common, &file);
    let config = json!({
        "subcommand": "critline",
        "p0": p0,
        "p2": p2,
        "seed": seed,
        "format": format.as_str(),
        "output": output_value(&sink.target),
    });
    let point = beta_c(p0, p2)?;
    match format {
        Format::Csv => {
            header(sink, &config, seed);
            sink.line("p0,p2,beta_c,b_c");
            sink.line(&format!(
                "{},{},{},{}",
                f17(point.p0),
                f17(point.p2),
                f17(point.beta_c),
                f17(point.b_c)
            ));
        }
        Format::Json => sink.buf = json_envelope(&config, seed, serde_json::to_value(point)?),
    }
    Ok(())
}

fn cmd_scan(args: ScanArgs, sink: &mut Sink) -> anyhow::Result<()> {
    let file = load_config(&args.common.config, "scan")?;
    let p0_min = pick(&args.p0_min, &file.p0_min).unwrap_or(0.05);
    let p0_max = pick(&args.p0_max, &file.p0_max).unwrap_or(0.9);
    let p2_min = pick(&args.p2_min, &file.p2_min).unwrap_or(0.05);
    let p2_max = pick(&args.p2_max, &file.p2_max).unwrap_or(0.9);
    let grid = pick(&args.grid, &file.grid).unwrap_or(20);
    let seed = pick(&args.common.seed, &file.seed).unwrap_or(0);
    let format = resolve_format(&args.common, &file)?;
    sink.target = resolve_output(&args.common, &file);
    let config = json!({
        "subcommand": "scan",
        "p0_min": p0_min,
        "p0_max": p0_max,
        "p2_min": p2_min,
        "p2_max": p2_max,
        "grid": grid,
        "seed": seed,
        "format": format.as_str(),
        "output": output_value(&sink.target),
    });
    let entries = scan_surface((p0_min, p0_max), (p2_min, p2_max), grid)?;
    match format {
        Format::Csv => {
            header(sink, &config, seed);
            sink.line("p0,p2,beta_c,b_c");
            for entry in &entries {
                match entry {
                    SurfaceEntry::Point(pt) => sink.line(&format!(
                        "{},{},{},{}",
                        f17(pt.p0),
                        f17(pt.p2),
                        f17(pt.beta_c),
                        f17(pt.b_c)
                    )),
                    SurfaceEntry::Skipped { p0, p2, reason } => {
                        sink.line(&format!("# skipped p0={p0} p2={p2}: {reason}"))
                    }
                }
            }
        }
        Format::Json => {
            let values: Vec<Value> = entries
                .iter()
                .map(|entry| match entry {
                    SurfaceEntry::Point(pt) => {
                        json!({"p0": pt.p0, "p2": pt.p2, "beta_c": pt.beta_c, "b_c": pt.b_c})
                    }
                    SurfaceEntry::Skipped { p0, p2, reason } => {
                        json!({"p0": p0, "p2": p2, "skipped": reason})
                    }
                })
                .collect();
            sink.buf = json_envelope(&config, seed, json!({ "grid": values }));
        }
    }
    Ok(())
}

// ───────────────────────────── scaling ─────────────────────────────

fn cmd_scaling(args: ScalingArgs, sink: &mut Sink) -> anyhow::Result<()> {
    let file = load_config(&args.common.config, "scaling")?;
    let spec = resolve_model(&args.common, &file)?;
    let n_max = pick(&args.n_max, &file.n_max).unwrap_or(1000);
    let seed = pick(&args.common.seed, &file.seed).unwrap_or(0);
    let format = resolve_format(&args.common, &file)?;
    sink.target = resolve_output(&args.common, &file);
    let config = json!({
        "subcommand": "scaling",
        "p": spec.probs,
        "x": spec.x,
        "n_max": n_max,
        "seed": seed,
        "format": format.as_str(),
        "output": output_value(&sink.target),
    });
    let result = critical_scaling(&spec.dist, spec.x, n_max)?;
    match format {
        Format::Csv => {
            header(sink, &config, seed);
            sink.line(&format!("# b_c: {}", f17(result.b_c)));
            sink.line(&format!(
                "# fit: meanN ~ amplitude * n^exponent, exponent={}, amplitude={}, \
                 window=[{},{}], rms={}",
                f17(result.exponent),
                f17(result.amplitude),
                result.window.0,
                result.window.1,
                f17(result.rms_residual)
            ));
            sink.line("n,meanN,n2_times_meanN");
            for &(n, mean) in &result.series {
                sink.line(&format!(
                    "{n},{},{}",
                    f17(mean),
                    f17((n as f64) * (n as f64) * mean)
                ));
            }
        }
        Format::Json => {
            let series: Vec<Value> = result
                .series
                .iter()
                .map(|&(n, m)| json!({"n": n, "meanN": m, "n2_times_meanN": (n as f64)*(n as f64)*m}))
                .collect();
            sink.buf = json_envelope(
                &config,
                seed,
                json!({
                    "b_c": result.b_c,
                    "exponent": result.exponent,
                    "amplitude": result.amplitude,
                    "rms_residual": result.rms_residual,
                    "window": [result.window.0, result.window.1],
                    "series": series,
                }),
            );
        }
    }
    Ok(())
}

// ───────────────────────────── rho ─────────────────────────────

fn cmd_rho(args: RhoArgs, sink: &mut Sink) -> anyhow::Result<()> {
    let file = load_config(&args.common.config, "rho")?;
    let p1 = pick(&args.p1, &file.p1).unwrap_or(0.9);
    let tol = pick(&args.tol, &file.tol).unwrap_or(1e-9);
    let seed = pick(&args.common.seed, &file.seed).unwrap_or(0);
    let format = resolve_format(&args.common, &file)?;
    let crossover = args.crossover || file.crossover.unwrap_or(false);
    sink.target = resolve_output(&args.common, &file);

    if crossover {
        let b = pick(&args.common.b, &file.b).unwrap_or(1.1);
        let n_max = pick(&args.n_max, &file.n_max).unwrap_or(1000);
        let early_text = pick(&args.window_early, &file.window_early).unwrap_or("10:50".into());
        let late_text = pick(&args.window_late, &file.window_late).unwrap_or("50:1000".into());
        let early = parse_window(&early_text)?;
        let late = parse_window(&late_text)?;
        let config = json!({
            "subcommand": "rho",
            "p1": p1,
            "b": b,
            "n_max": n_max,
            "crossover": true,
            "window_early": early_text,
            "window_late": late_text,
            "seed": seed,
            "format": format.as_str(),
            "output": output_value(&sink.target),
        });
        let series = loglog_u_series(p1, b, n_max)?;
        let fit_window = |lo: f64, hi: f64| -> anyhow::Result<FitResult> {
            let (xs, ys): (Vec<f64>, Vec<f64>) = series
                .iter()
                .filter(|(n, _)| (*n as f64) >= lo && (*n as f64) <= hi)
                .map(|&(n, y)| (n as f64, y))
                .unzip();
            Ok(fit_series(&xs, &ys, FitModel::GammaDelta)?)
        };
        let fit_early = fit_window(early.0, early.1)?;
        let fit_late = fit_window(late.0, late.1)?;
        match format {
            Format::Csv => {
                header(sink, &config, seed);
                for (label, f, w) in [("early", &fit_early, &early), ("late", &fit_late, &late)] {
                    sink.line(&format!(
                        "# fit {label}: y ~ gamma - delta/n, gamma={}, delta={}, \
                         window=[{},{}], rms={}",
                        f17(f.c0),
                        f17(f.c1),
                        w.0,
                        w.1,
                        f17(f.rms_residual)
                    ));
                }
                sink.line("n,y");
                for &(n, y) in &series {
                    sink.line(&format!("{n},{}", f17(y)));
                }
            }
            Format::Json => {
                let rows: Vec<Value> =
                    series.iter().map(|&(n, y)| json!({"n": n, "y": y})).collect();
                sink.buf = json_envelope(
                    &config,
                    seed,
                    json!({
                        "series": rows,
                        "fit_early": fit_early,
                        "fit_late": fit_late,
                    }),
                );
            }
        }
        return Ok(());
    }

    let bs: Vec<f64> = if let Some(b) = pick(&args.common.b, &file.b) {
        vec![b]
    } else if let Some(values) = &file.b_values {
        values.clone()
    } else {
        let b_min = pick(&args.b_min, &file.b_min).unwrap_or(1.05);
        let b_max = pick(&args.b_max, &file.b_max).unwrap_or(1.5);
        let b_step = pick(&args.b_step, &file.b_step).unwrap_or(0.025);
        if !(b_step > 0.0 && b_max >= b_min) {
            return Err(anyhow!(bgw::Error::InvalidParams(format!(
                "bad sweep: b_min={b_min}, b_max={b_max}, b_step={b_step}"
            ))));
        }
        let count = ((b_max - b_min) / b_step).round() as usize;
        (0..=count).map(|i| b_min + b_step * i as f64).collect()
    };
    let config = json!({
        "subcommand": "rho",
        "p1": p1,
        "b_values": bs,
        "tol": tol,
        "crossover": false,
        "seed": seed,
        "format": format.as_str(),
        "output": output_value(&sink.target),
    });
    let results = rho_sweep(p1, &bs, tol)?;
    match format {
        Format::Csv => {
            header(sink, &config, seed);
            sink.line("b,log_rho,loglog_rho,lower_bound,upper_bound,psi");
            for r in &results {
                sink.line(&format!(
                    "{},{},{},{},{},{}",
                    f17(r.b),
                    f17(r.log_rho),
                    f17(r.loglog_rho),
                    f17(r.lower_bound),
                    f17(r.upper_bound),
                    f17(-r.log_rho)
                ));
                if !r.converged {
                    sink.line(&format!(
                        "# warning: b={} stopped before reaching tolerance (n_used={})",
                        r.b, r.n_used
                    ));
                }
            }
        }
        Format::Json => {
            let rows: Vec<Value> = results
                .iter()
                .map(|r| {
                    let mut v = serde_json::to_value(r).expect("rho result serializes");
                    v["psi"] = json!(-r.log_rho);
                    v
                })
                .collect();
            sink.buf = json_envelope(&config, seed, json!({ "sweep": rows }));
        }
    }
    Ok(())
}

// ───────────────────────────── fit ─────────────────────────────

fn cmd_fit(args: FitArgs, sink: &mut Sink) -> anyhow::Result<()> {
    let file = load_config(&args.common.config, "fit")?;
    let input = pick(
        &args.input,
        &file.input.as_ref().map(PathBuf::from),
    )
    .ok_or_else(|| {
        anyhow!(bgw::Error::InvalidParams(
            "fit needs an input CSV (--input)".into()
        ))
    })?;
    let model = match (args.model, file.model.as_deref()) {
        (Some(m), _) => m.to_model(),
        (None, Some("powerlaw" | "power_law")) => FitModel::PowerLaw,
        (None, Some("gamma_delta")) => FitModel::GammaDelta,
        (None, Some("log_linear")) => FitModel::LogLinear,
        (None, Some(other)) => bail!("unknown fit model {other:?} in config file"),
        (None, None) => FitModel::PowerLaw,
    };
    let window = match pick(&args.window, &file.window) {
        Some(text) => Some(parse_window(&text)?),
        None => None,
    };
    let seed = pick(&args.common.seed, &file.seed).unwrap_or(0);
    let format = resolve_format(&args.common, &file)?;
    sink.target = resolve_output(&args.common, &file);

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(&input)
        .with_context(|| format!("cannot open input CSV {}", input.display()))?;
    let headers = reader.headers().context("input CSV has no header row")?.clone();
    let col = |wanted: &Option<String>, default_idx: usize, role: &str| -> anyhow::Result<usize> {
        match wanted {
            Some(name) => headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| anyhow!("no column named {name:?} for {role} in {headers:?}")),
            None => {
                if headers.len() <= default_idx {
                    bail!("input CSV has only {} columns", headers.len());
                }
                Ok(default_idx)
            }
        }
    };
    let x_col = pick(&args.x_col, &file.x_col);
    let y_col = pick(&args.y_col, &file.y_col);
    let xi = col(&x_col, 0, "x")?;
    let yi = col(&y_col, 1, "y")?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in reader.records() {
        let record = record.context("malformed CSV record")?;
        let x: f64 = record
            .get(xi)
            .ok_or_else(|| anyhow!("row is missing column {xi}"))?
            .parse()
            .context("cannot parse x value")?;
        let y: f64 = record
            .get(yi)
            .ok_or_else(|| anyhow!("row is missing column {yi}"))?
            .parse()
            .context("cannot parse y value")?;
        if let Some((lo, hi)) = window {
            if x < lo || x > hi {
                continue;
            }
        }
        xs.push(x);
        ys.push(y);
    }

    let model_str = serde_json::to_value(model)?
        .as_str()
        .expect("model serializes to a string")
        .to_string();
    let config = json!({
        "subcommand": "fit",
        "input": input.display().to_string(),
        "model": model_str,
        "x_col": x_col.clone().unwrap_or_else(|| headers[xi].to_string()),
        "y_col": y_col.clone().unwrap_or_else(|| headers[yi].to_string()),
        "window": window.map(|(lo, hi)| format!("{lo}:{hi}")),
        "seed": seed,
        "format": format.as_str(),
        "output": output_value(&sink.target),
    });
    let fitted = fit_series(&xs, &ys, model)?;
    match format {
        Format::Csv => {
            header(sink, &config, seed);
            sink.line("model,c0,c1,rms_residual,points");
            sink.line(&format!(
                "{model_str},{},{},{},{}",
                f17(fitted.c0),
                f17(fitted.c1),
                f17(fitted.rms_residual),
                fitted.points
            ));
        }
        Format::Json => sink.buf = json_envelope(&config, seed, serde_json::to_value(fitted)?),
    }
    Ok(())
}

// ───────────────────────────── check ─────────────────────────────

struct CheckReport {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn cmd_check(args: CheckArgs, sink: &mut Sink) -> anyhow::Result<()> {
    let file = load_config(&args.common.config, "check")?;
    let seed = pick(&args.common.seed, &file.seed).unwrap_or(1);
    let format = resolve_format(&args.common, &file)?;
    sink.target = resolve_output(&args.common, &file);
    let config = json!({
        "subcommand": "check",
        "seed": seed,
        "format": format.as_str(),
        "output": output_value(&sink.target),
    });

    let mut reports = Vec::new();
    reports.push(check_enumeration_vs_recursion());
    reports.push(check_free_process_reduction());
    reports.push(check_matrix_stationarity());
    reports.push(check_sampled_chain(seed));
    reports.push(check_chain_estimate(seed));
    reports.push(check_fixed_point_vs_trajectory());
    reports.push(check_growth_bounds());
    reports.push(check_critline_vs_bisection());

    let failed = reports.iter().filter(|r| !r.pass).count();
    match format {
        Format::Csv => {
            header(sink, &config, seed);
            sink.line("check,pass,detail");
            for r in &reports {
                sink.line(&format!("{},{},\"{}\"", r.name, r.pass, r.detail));
            }
            sink.line(&format!(
                "# {} of {} checks passed",
                reports.len() - failed,
                reports.len()
            ));
        }
        Format::Json => {
            let rows: Vec<Value> = reports
                .iter()
                .map(|r| json!({"check": r.name, "pass": r.pass, "detail": r.detail}))
                .collect();
            sink.buf = json_envelope(
                &config,
                seed,
                json!({"checks": rows, "passed": reports.len() - failed, "total": reports.len()}),
            );
        }
    }
    if failed > 0 {
        return Err(anyhow!(bgw::Error::Numerical(format!(
            "{failed} of {} consistency checks failed",
            reports.len()
        ))));
    }
    Ok(())
}

fn report(name: &'static str, result: anyhow::Result<(bool, String)>) -> CheckReport {
    match result {
        Ok((pass, detail)) => CheckReport { name, pass, detail },
        Err(e) => CheckReport {
            name,
            pass: false,
            detail: format!("error: {e:#}"),
        },
    }
}

fn check_params(probs: &[f64], b: f64, x: u8, depth: usize) -> anyhow::Result<ModelParams> {
    let dist = OffspringDist::new(probs.to_vec())?;
    Ok(ModelParams::new(
        dist.clone(),
        Interaction::two_class_from_b(dist.k_max(), b)?,
        x,
        depth,
    )?)
}

/// Exact enumeration against the recursion: partition values and the five
/// derived observables at small depths.
fn check_enumeration_vs_recursion() -> CheckReport {
    report("enumeration-vs-recursion", (|| {
        let mut worst = 0.0f64;
        for &b in &[1.0, 2.0] {
            for x in [1u8, 2] {
                for depth in 0..=2usize {
                    let params = check_params(&[0.4, 0.3, 0.3], b, x, depth)?;
                    let measure = ExactMeasure::new(params.clone())?;
                    let obs = observables(&params, depth)?;
                    let n22 = |t: &Tree| t.favoured_links(x) as f64;
                    let pairs = [
                        (measure.partition(), obs.partition),
                        (measure.expectation(|t| t.frontier_counts().0 as f64), obs.mean_l),
                        (measure.expectation(|t| t.frontier_counts().1 as f64), obs.mean_q),
                        (measure.expectation(n22), obs.mean_n22),
                        (measure.covariance(n22, n22), obs.var_n22),
                    ];
                    for (want, got) in pairs {
                        let denom = want.abs().max(1.0);
                        worst = worst.max((want - got).abs() / denom);
                    }
                }
            }
        }
        Ok((worst <= 1e-10, format!("worst relative error {worst:.3e}")))
    })())
}

/// Without interaction the mean frontier count is the branching mean to the
/// power depth+1.
fn check_free_process_reduction() -> CheckReport {
    report("free-process-reduction", (|| {
        let params = check_params(&[0.4, 0.3, 0.3], 1.0, 1, 0)?;
        let mean = params.dist.mean();
        let mut worst = 0.0f64;
        for depth in 0..=12usize {
            let obs = observables(&ModelParams { depth, ..params.clone() }, depth)?;
            let want = mean.powi(depth as i32 + 1);
            worst = worst.max((obs.mean_n - want).abs() / want);
        }
        Ok((worst <= 1e-12, format!("worst relative error {worst:.3e}")))
    })())
}

/// The exact one-step matrix of the local chain holds the Gibbs measure
/// stationary and satisfies detailed balance.
fn check_matrix_stationarity() -> CheckReport {
    report("matrix-stationarity", (|| {
        let mut worst = 0.0f64;
        for &b in &[1.0, 2.0] {
            for x in [1u8, 2] {
                let params = check_params(&[0.4, 0.3, 0.3], b, x, 1)?;
                let matrix = bgw::mcmc::local_transition_matrix(&params, &[0.5, 0.5], false)?;
                let measure = ExactMeasure::new(params)?;
                let pi: Vec<f64> = matrix
                    .states()
                    .iter()
                    .map(|t| measure.probability(t).expect("state is enumerated"))
                    .collect();
                worst = worst.max(matrix.stationarity_residual(&pi));
                worst = worst.max(matrix.detailed_balance_residual(&pi));
            }
        }
        Ok((worst <= 1e-12, format!("worst residual {worst:.3e}")))
    })())
}

/// A sampled local chain reaches the exact distribution in total variation.
fn check_sampled_chain(seed: u64) -> CheckReport {
    report("sampled-chain-tv", (|| {
        use rand::SeedableRng;
        let params = check_params(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 2.0, 2, 1)?;
        let measure = ExactMeasure::new(params.clone())?;
        let lambda = [0.5, 0.5];
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut tree = Tree::sample_gw(1, &params.dist, &mut rng);
        let burn_in = 2_000u64;
        let steps = 200_000u64;
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..burn_in {
            bgw::mcmc::local_step(&mut tree, &params, &lambda, true, &mut rng);
        }
        for _ in 0..steps {
            bgw::mcmc::local_step(&mut tree, &params, &lambda, true, &mut rng);
            *counts.entry(tree.clone()).or_insert(0u64) += 1;
        }
        let tv = measure.tv_distance_to_counts(&counts, steps);
        Ok((tv < 0.02, format!("TV distance {tv:.4} after {steps} steps")))
    })())
}

/// The chain's mean favoured-link estimate agrees with exact enumeration
/// within a generous multiple of its own standard error.
fn check_chain_estimate(seed: u64) -> CheckReport {
    report("chain-estimate-vs-oracle", (|| {
        let params = check_params(&[0.4, 0.3, 0.3], 1.5, 1, 2)?;
        let measure = ExactMeasure::new(params.clone())?;
        let exact = measure.expectation(|t| t.favoured_links(1) as f64);
        let cfg = ChainConfig {
            params,
            kind: ChainKind::Local,
            lambda: vec![1.0 / 3.0; 3],
            steps: 200_000,
            seed,
            stream: 7,
            thinning: 10,
            accelerated: true,
        };
        let obs: Vec<(String, Box<dyn Fn(&Tree) -> f64 + Send + Sync>)> = vec![(
            "n22".into(),
            Box::new(|t: &Tree| t.favoured_links(1) as f64),
        )];
        let stats = run_chain(&cfg, &obs)?;
        let est = &stats.observables[0];
        let gap = (est.mean - exact).abs();
        let budget = 8.0 * est.stderr + 1e-3;
        Ok((
            gap <= budget,
            format!(
                "estimate {:.6} vs exact {exact:.6} (gap {gap:.2e}, stderr {:.2e})",
                est.mean, est.stderr
            ),
        ))
    })())
}

/// The closed-form fixed point is where the iteration actually lands.
fn check_fixed_point_vs_trajectory() -> CheckReport {
    report("fixed-point-vs-trajectory", (|| {
        let dist = OffspringDist::new(vec![0.4, 0.3, 0.3])?;
        let b = 1.02;
        let fp = fixed_point(&dist, b)?;
        if !fp.exists {
            bail!("no fixed point at b = {b}");
        }
        let (mut u, mut v) = (1.0, 1.0);
        for _ in 0..20_000 {
            (u, v) = f_map(u, v, &dist, b);
        }
        let gap = (u - fp.u).abs().max((v - fp.v).abs());
        Ok((gap <= 1e-9, format!("trajectory-limit gap {gap:.3e}")))
    })())
}

/// Growth-constant estimates respect their two-sided bounds.
fn check_growth_bounds() -> CheckReport {
    report("growth-bounds", (|| {
        let mut detail = String::new();
        for &b in &[1.1, 1.3] {
            let r = rho(0.9, b, 1e-9)?;
            if !r.converged {
                bail!("growth sequence did not converge at b = {b}");
            }
            let rho_val = r.log_rho.exp();
            if !(r.lower_bound <= rho_val && rho_val <= r.upper_bound) {
                return Ok((false, format!("bound violated at b = {b}")));
            }
            detail = format!("last: rho({b}) = {rho_val:.6e} within bounds");
        }
        Ok((true, detail))
    })())
}

/// The closed-form critical coupling matches empirical bisection.
fn check_critline_vs_bisection() -> CheckReport {
    report("critline-vs-bisection", (|| {
        let dist = OffspringDist::new(vec![0.4, 0.3, 0.3])?;
        let closed = beta_c(0.4, 0.3)?;
        let bracket = empirical_criticality(&dist, (1.0, 1.5), 1e-5)?;
        let gap = (bracket.estimate() - closed.b_c).abs();
        Ok((gap <= 1e-3, format!("closed form vs bisection gap {gap:.3e}")))
    })())
}
