//! Command-line front end. [`run`] parses argv, executes one subcommand and
//! returns the process exit code: 0 on success, 2 on a usage error, 1 when
//! the data or the requested computation fails.
//!
//! Every output begins with a header holding the version, the full
//! argument list and the seed, so any run can be replayed. JSON outputs wrap
//! the result as `{"header": ..., "result": ...}`; CSV outputs start with
//! `#` comment lines, which the panel loader skips.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::combiner::{
    combine_exhaustive, combine_heuristic, combine_k1, combine_k1_data, combine_loglinear,
    combine_random, combine_unequal, K1Options, Spacing, DEFAULT_INTERVALS,
};
use crate::crs::run_test;
use crate::data::{
    load_panel, load_panel_inferred, write_panel_to, ClusterId, Grouping, Hypothesis,
    PanelDataset, Schema,
};
use crate::error::Error;
use crate::estimation::{LimitParams, PairTable, PsiMatrix, WorkingModel};
use crate::formula::RegressionSpec;
use crate::power::{power_of_grouping, power_of_limits, PowerMethod};
use crate::simulation::{
    calibrate, gen_calibrated, gen_dgp, rejection_curve, run_experiment, ArInit,
    CalibrationParams, CurveConfig, CurveOutput, DgpSpec, DgpVariant, Experiment, Policy,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(
    name = "crscombine",
    version,
    about = "Sign-change randomization tests with few clusters, their local power, and power-maximizing cluster combination"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// File of `key = value` lines read as `--key value` flags; flags given
    /// on the command line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the randomization test for one grouping.
    Test(TestArgs),
    /// Choose a grouping that maximizes estimated local power.
    Combine(CombineArgs),
    /// Local asymptotic power of a grouping or of given (xi, sigma).
    Power(PowerArgs),
    /// Rejection-rate curves on simulated panels.
    Simulate(SimulateArgs),
    /// Fit the outcome model and per-cluster AR(1) errors of a panel.
    Calibrate(CalibrateArgs),
    /// Write one simulated panel as CSV.
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Input CSV panel.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Regression, e.g. `y ~ x + d + fe(cluster)`. Default: the outcome on
    /// every other column with an intercept.
    #[arg(long)]
    formula: Option<String>,
    /// Outcome column when no formula is given.
    #[arg(long, default_value = "y")]
    outcome: String,
    #[arg(long, default_value = "cluster")]
    cluster_col: String,
    #[arg(long, default_value = "time")]
    time_col: String,
    /// The file has no time column; rows are numbered within clusters.
    #[arg(long)]
    no_time: bool,
    /// Control cluster ids, comma separated.
    #[arg(long)]
    controls: Option<String>,
    /// Treated cluster ids, comma separated.
    #[arg(long)]
    treated: Option<String>,
    /// 0/1 column; clusters where it is ever 1 are treated.
    #[arg(long)]
    treatment_col: Option<String>,
    #[arg(long, default_value = ",")]
    delimiter: char,
}

#[derive(Args, Debug, Clone)]
struct HypArgs {
    /// Contrast c over the formula covariates, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    c: String,
    /// Null value of c'beta.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    lambda: f64,
    /// Significance level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyp: HypArgs,
    /// Grouping literal: `c1:t1,c2:t2` for pairs, `c1:{t1,t2}` for groups.
    #[arg(long)]
    grouping: Option<String>,
    /// File holding a grouping literal.
    #[arg(long, value_name = "PATH")]
    grouping_file: Option<PathBuf>,
    /// Output JSON (default: stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum CombineMethod {
    /// Interval-partitioned assignment programs (K = 1 objective).
    Bilp,
    /// Pairwise-swap search started from the bilp solution.
    Heuristic,
    /// Every pairing (at most 8 pairs).
    Exhaustive,
    /// Uniformly random pairing.
    Random,
    /// One assignment program on the summed log terms.
    Loglinear,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SpacingArg {
    Raw,
    Log,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum PowerMethodArg {
    /// Closed form when K = 1, Monte Carlo otherwise.
    Auto,
    /// Closed form; requires K = 1.
    K1,
    /// Enumeration of the sign-change events (q <= 4).
    Exact,
    /// Monte Carlo on the limit experiment.
    Mc,
}

#[derive(Args, Debug, Clone)]
struct PowerOpts {
    #[arg(long, value_enum, default_value_t = PowerMethodArg::Auto)]
    power_method: PowerMethodArg,
    /// Monte Carlo replications.
    #[arg(long, default_value_t = 100_000)]
    reps: u64,
    /// Replications per term of the exact enumeration.
    #[arg(long, default_value_t = 100_000)]
    term_reps: u64,
    /// Seed of every random draw; drawn and reported when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CombineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyp: HypArgs,
    /// Local alternative used to rank groupings.
    #[arg(long, allow_hyphen_values = true)]
    delta: f64,
    #[arg(long, value_enum, default_value_t = CombineMethod::Bilp)]
    method: CombineMethod,
    /// Number of subintervals of the side constraint.
    #[arg(long = "A", default_value_t = DEFAULT_INTERVALS)]
    intervals: usize,
    #[arg(long, value_enum, default_value_t = SpacingArg::Raw)]
    spacing: SpacingArg,
    /// Natural log of the lower end of the first subinterval.
    #[arg(long, allow_hyphen_values = true)]
    ln_eps0: Option<f64>,
    /// Working model for sigma: iid, hac, hac:L or ar1 (default: ar1 with a
    /// time column, iid otherwise).
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    power: PowerOpts,
    /// Output JSON (default: stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// CSV of per-interval results (bilp) or the swap trace (heuristic).
    #[arg(long, value_name = "PATH")]
    diagnostics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PowerArgs {
    /// Input CSV panel; omit when giving --xi and --sigma.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long)]
    formula: Option<String>,
    #[arg(long, default_value = "y")]
    outcome: String,
    #[arg(long, default_value = "cluster")]
    cluster_col: String,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long)]
    no_time: bool,
    #[arg(long)]
    controls: Option<String>,
    #[arg(long)]
    treated: Option<String>,
    #[arg(long)]
    treatment_col: Option<String>,
    #[arg(long, default_value = ",")]
    delimiter: char,
    #[arg(long, allow_hyphen_values = true)]
    c: Option<String>,
    #[arg(long)]
    grouping: Option<String>,
    #[arg(long, value_name = "PATH")]
    grouping_file: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// Size ratios of the groups, comma separated.
    #[arg(long)]
    xi: Option<String>,
    /// Limiting score standard deviations, comma separated.
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    power: PowerOpts,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Built-in design 1, 2 or 3.
    #[arg(long, conflicts_with = "calibrated")]
    dgp: Option<u32>,
    /// Number of high-variance clusters of the design (1 to 4).
    #[arg(long, default_value_t = 1)]
    h: usize,
    /// Calibration JSON written by `calibrate`; the grid is then the shift
    /// of the target coefficient.
    #[arg(long, value_name = "PATH")]
    calibrated: Option<PathBuf>,
    /// Index of the shifted coefficient among the calibrated covariates.
    #[arg(long, default_value_t = 0)]
    target: usize,
    /// Error specification of the calibrated panels: 1, 2 or 3.
    #[arg(long, default_value_t = 1)]
    nu_spec: u32,
    /// Grid as `lo:hi:step` or a comma list.
    #[arg(long, allow_hyphen_values = true)]
    betas: String,
    /// Comma list of crs_data, crs_random, fixed, all_omegas.
    #[arg(long, default_value = "crs_data")]
    policy: String,
    /// Grouping of the `fixed` policy.
    #[arg(long)]
    grouping: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 2000)]
    reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Working model for sigma inside crs_data.
    #[arg(long, default_value = "ar1")]
    model: String,
    #[arg(long = "A", default_value_t = DEFAULT_INTERVALS)]
    intervals: usize,
    /// Replications behind each power estimate of the swap heuristic.
    #[arg(long, default_value_t = 2000)]
    heuristic_reps: u64,
    /// |delta| of crs_data (default 2 sqrt(qT)).
    #[arg(long)]
    delta_magnitude: Option<f64>,
    /// Start the AR(1) errors at zero with this many burn-in periods
    /// instead of the stationary draw.
    #[arg(long)]
    burnin: Option<usize>,
    /// Curve CSV (default: stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Per-grouping rejection matrix of all_omegas.
    #[arg(long, value_name = "PATH")]
    omega_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, conflicts_with = "calibrated")]
    dgp: Option<u32>,
    #[arg(long, default_value_t = 1)]
    h: usize,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    beta: f64,
    #[arg(long, value_name = "PATH")]
    calibrated: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    target: usize,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    delta_shift: f64,
    #[arg(long, default_value_t = 1)]
    nu_spec: u32,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Data(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Serialize)]
struct Header {
    tool: &'static str,
    version: &'static str,
    args: Vec<String>,
    seed: Option<u64>,
}

struct Ctx<'a> {
    args: Vec<String>,
    stdout: &'a mut (dyn Write + Send),
    stderr: &'a mut (dyn Write + Send),
}

impl Ctx<'_> {
    fn header(&self, seed: Option<u64>) -> Header {
        Header {
            tool: "crscombine",
            version: VERSION,
            args: self.args.clone(),
            seed,
        }
    }

    fn csv_header(&self, seed: Option<u64>) -> String {
        let mut s = format!("# crscombine {VERSION}\n# args: {}\n", self.args.join(" "));
        if let Some(seed) = seed {
            s.push_str(&format!("# seed: {seed}\n"));
        }
        s
    }

    fn warn(&mut self, msg: &str) {
        let _ = writeln!(self.stderr, "warning: {msg}");
    }

    /// Resolves an optional seed, drawing and reporting one when absent.
    fn seed(&mut self, seed: Option<u64>) -> u64 {
        seed.unwrap_or_else(|| {
            let s = rand::random::<u64>();
            let _ = writeln!(self.stderr, "seed: {s}");
            s
        })
    }

    fn emit(&mut self, out: Option<&Path>, text: &str) -> CliResult<()> {
        match out {
            Some(p) => fs::write(p, text).map_err(|e| CliError::Data(Error::io(p, e))),
            None => self
                .stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Data(Error::io("<stdout>", e))),
        }
    }

    fn emit_json<T: Serialize>(&mut self, out: Option<&Path>, seed: Option<u64>, result: &T) -> CliResult<()> {
        let doc = json!({ "header": self.header(seed), "result": result });
        let mut text = serde_json::to_string_pretty(&doc).expect("serializable");
        text.push('\n');
        self.emit(out, &text)
    }
}

/// Runs the command line `argv` (program name first) with the process
/// streams and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// As [`run`], writing to the given streams.
pub fn run_with<I, T>(argv: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let raw: Vec<String> = argv
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let argv = match expand_config(raw) {
        Ok(a) => a,
        Err(msg) => {
            let _ = writeln!(stderr, "error: {msg}");
            return 2;
        }
    };
    let mut cmd = Cli::command();
    for name in ["test", "combine", "power", "simulate", "calibrate", "generate"] {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    let matches = match cmd.try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return 2;
        }
    };
    let mut ctx = Ctx {
        args: argv[1..].to_vec(),
        stdout,
        stderr,
    };
    let result = match cli.threads {
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command, &mut ctx)),
            Err(e) => Err(usage(format!("cannot start {n} threads: {e}"))),
        },
        None => dispatch(cli.command, &mut ctx),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(ctx.stderr, "error: {m}");
            2
        }
        Err(CliError::Data(e)) => {
            let _ = writeln!(ctx.stderr, "error: {e}");
            1
        }
    }
}

/// Splices the `key = value` lines of `--config PATH` in right after the
/// subcommand name, so later command-line flags override them.
fn expand_config(argv: Vec<String>) -> std::result::Result<Vec<String>, String> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected `key = value`", n + 1))?;
        let k = k.trim().trim_start_matches("--");
        let v = v.trim();
        if matches!(k, "config" | "threads") {
            return Err(format!("{path}:{}: `{k}` cannot be set from a config file", n + 1));
        }
        match v {
            "true" => extra.push(format!("--{k}")),
            "false" => {}
            _ => {
                extra.push(format!("--{k}"));
                extra.push(v.to_string());
            }
        }
    }
    let names = ["test", "combine", "power", "simulate", "calibrate", "generate"];
    let pos = argv
        .iter()
        .skip(1)
        .position(|a| names.contains(&a.as_str()))
        .map(|p| p + 2)
        .ok_or("--config needs a subcommand")?;
    let mut out = argv[..pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos..]);
    Ok(out)
}

fn dispatch(cmd: Command, ctx: &mut Ctx<'_>) -> CliResult<()> {
    match cmd {
        Command::Test(a) => cmd_test(a, ctx),
        Command::Combine(a) => cmd_combine(a, ctx),
        Command::Power(a) => cmd_power(a, ctx),
        Command::Simulate(a) => cmd_simulate(a, ctx),
        Command::Calibrate(a) => cmd_calibrate(a, ctx),
        Command::Generate(a) => cmd_generate(a, ctx),
    }
}

fn parse_ids(s: &str, what: &str) -> CliResult<BTreeSet<ClusterId>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<ClusterId>()
                .map_err(|_| usage(format!("{what}: `{t}` is not a cluster id")))
        })
        .collect()
}

fn parse_reals(s: &str, what: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("{what}: `{t}` is not a number")))
        })
        .collect()
}

/// `lo:hi:step` (inclusive, step > 0) or a comma list.
fn parse_grid(s: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [lo, hi, step] => {
            let v = parse_reals(&format!("{lo},{hi},{step}"), "grid")?;
            let (lo, hi, step) = (v[0], v[1], v[2]);
            if !(step > 0.0) || hi < lo {
                return Err(usage("grid `lo:hi:step` needs lo <= hi and step > 0"));
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            if n > 10_000 {
                return Err(usage("grid has more than 10000 points"));
            }
            Ok((0..=n).map(|i| lo + i as f64 * step).collect())
        }
        [_] => parse_reals(s, "grid"),
        _ => Err(usage(format!("cannot read grid `{s}`"))),
    }
}

fn parse_model(s: Option<&str>, d: &PanelDataset) -> CliResult<WorkingModel> {
    match s {
        Some(s) => s.parse().map_err(CliError::from),
        None => Ok(WorkingModel::default_for(d)),
    }
}

fn read_grouping(lit: Option<&str>, file: Option<&Path>) -> CliResult<Grouping> {
    match (lit, file) {
        (Some(_), Some(_)) => Err(usage("give either --grouping or --grouping-file")),
        (Some(l), None) => Grouping::parse(l).map_err(|e| usage(e.to_string())),
        (None, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(Error::io(p, e)))?;
            Grouping::parse(text.trim()).map_err(|e| usage(e.to_string()))
        }
        (None, None) => Err(usage("a grouping is required (--grouping or --grouping-file)")),
    }
}

fn power_method(o: &PowerOpts, seed: u64) -> PowerMethod {
    match o.power_method {
        PowerMethodArg::Auto => PowerMethod::Auto { reps: o.reps, seed },
        PowerMethodArg::K1 => PowerMethod::ClosedK1,
        PowerMethodArg::Exact => PowerMethod::Exact {
            term_reps: o.term_reps,
            seed,
        },
        PowerMethodArg::Mc => PowerMethod::MonteCarlo { reps: o.reps, seed },
    }
}

fn needs_seed(o: &PowerOpts) -> bool {
    o.power_method != PowerMethodArg::K1
}

fn csv_columns(path: &Path, delimiter: u8) -> CliResult<Vec<String>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Data(Error::Schema(format!("{}: {e}", path.display()))))?;
    let h = r
        .headers()
        .map_err(|e| CliError::Data(Error::Schema(format!("{}: {e}", path.display()))))?;
    Ok(h.iter().map(str::to_string).collect())
}

struct Loaded {
    data: PanelDataset,
    spec: RegressionSpec,
}

fn load(a: &DataArgs, ctx: &mut Ctx<'_>) -> CliResult<Loaded> {
    if !a.delimiter.is_ascii() {
        return Err(usage("the delimiter must be an ASCII character"));
    }
    let delim = a.delimiter as u8;
    let time = (!a.no_time).then_some(a.time_col.as_str());
    let spec: RegressionSpec = match &a.formula {
        Some(f) => f.parse()?,
        None => {
            let cols = csv_columns(&a.data, delim)?;
            let covs: Vec<&str> = cols
                .iter()
                .map(String::as_str)
                .filter(|c| *c != a.cluster_col && Some(*c) != time && *c != a.outcome)
                .collect();
            if covs.is_empty() {
                return Err(usage("the data has no covariate columns"));
            }
            format!("{} ~ {}", a.outcome, covs.join(" + ")).parse()?
        }
    };
    let covs: Vec<&str> = spec.covariates.iter().map(String::as_str).collect();
    let mut schema = Schema::new(&a.cluster_col, time, &spec.outcome, &covs);
    schema.delimiter = delim;
    let data = match (&a.controls, &a.treated, &a.treatment_col) {
        (Some(c), Some(t), None) => load_panel(
            &a.data,
            &schema,
            &parse_ids(c, "--controls")?,
            &parse_ids(t, "--treated")?,
        )?,
        (None, None, Some(col)) => {
            let d = load_panel_inferred(&a.data, &schema, col)?;
            let ids = |s: &BTreeSet<ClusterId>| {
                s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
            };
            let _ = writeln!(
                ctx.stderr,
                "inferred controls: {}; treated: {}",
                ids(d.controls()),
                ids(d.treated())
            );
            d
        }
        _ => {
            return Err(usage(
                "give --controls and --treated, or --treatment-col (not both)",
            ))
        }
    };
    Ok(Loaded { data, spec })
}

fn hypothesis(h: &HypArgs, delta: f64) -> CliResult<Hypothesis> {
    let c = parse_reals(&h.c, "--c")?;
    Hypothesis::new(c, h.lambda, h.alpha, delta).map_err(CliError::from)
}

fn cmd_test(a: TestArgs, ctx: &mut Ctx<'_>) -> CliResult<()> {
    let l = load(&a.data, ctx)?;
    let g = read_grouping(a.grouping.as_deref(), a.grouping_file.as_deref())?;
    let h = hypothesis(&a.hyp, 0.0)?;
    let outcome = run_test(&l.data, &g, &h, &l.spec)?;
    let result = json!({
        "grouping": g.to_string(),
        "formula": l.spec.to_string(),
        "outcome": outcome,
    });
    ctx.emit_json(a.out.as_deref(), None, &result)
}

fn k1_options(intervals: usize, spacing: SpacingArg, ln_eps0: Option<f64>) -> K1Options {
    K1Options {
        intervals,
        spacing: match spacing {
            SpacingArg::Raw => Spacing::Raw,
            SpacingArg::Log => Spacing::Log,
        },
        ln_eps0,
    }
}

fn cmd_combine(a: CombineArgs, ctx: &mut Ctx<'_>) -> CliResult<()> {
    let l = load(&a.data, ctx)?;
    let h = hypothesis(&a.hyp, a.delta)?;
    let model = parse_model(a.model.as_deref(), &l.data)?;
    let opts = k1_options(a.intervals, a.spacing, a.ln_eps0);
    let paired = l.data.controls().len() == l.data.treated().len();
    let uses_seed = match a.method {
        CombineMethod::Random => true,
        CombineMethod::Heuristic | CombineMethod::Exhaustive => needs_seed(&a.power),
        _ => false,
    };
    let seed = if uses_seed { Some(ctx.seed(a.power.seed)) } else { a.power.seed };
    let method = power_method(&a.power, seed.unwrap_or(0));
    let (result, diagnostics) = match a.method {
        CombineMethod::Bilp => {
            let out = if paired {
                combine_k1_data(&l.data, &h, &l.spec, model, opts)?
            } else {
                combine_unequal(&l.data, &h, &l.spec, model, opts, None)?
            };
            for w in &out.warnings {
                ctx.warn(w);
            }
            let mut csv = ctx.csv_header(seed);
            csv.push_str("a,ln_lo,ln_hi,feasible,power\n");
            for d in &out.diagnostics {
                csv.push_str(&format!(
                    "{},{:?},{:?},{},{}\n",
                    d.a,
                    d.ln_lo,
                    d.ln_hi,
                    d.feasible,
                    d.power.map_or(String::new(), |p| format!("{p:?}"))
                ));
            }
            let result = json!({
                "method": "bilp",
                "grouping": out.grouping.to_string(),
                "power": out.power,
                "objective": out.solution.as_ref().map(|s| s.objective),
                "warnings": out.warnings,
            });
            (result, Some(csv))
        }
        CombineMethod::Heuristic => {
            let out = combine_heuristic(&l.data, &h, &l.spec, model, method, opts)?;
            let mut csv = ctx.csv_header(seed);
            csv.push_str("step,swap_i,swap_j,power\n");
            for (i, s) in out.trace.iter().enumerate() {
                let (si, sj) = s
                    .swap
                    .map_or((String::new(), String::new()), |(x, y)| (x.to_string(), y.to_string()));
                csv.push_str(&format!("{i},{si},{sj},{:?}\n", s.power));
            }
            let result = json!({
                "method": "heuristic",
                "grouping": out.grouping.to_string(),
                "power": out.power,
                "initial_power": out.initial_power,
                "swaps": out.trace.len() - 1,
            });
            (result, Some(csv))
        }
        CombineMethod::Exhaustive => {
            let (g, p) = combine_exhaustive(&l.data, &h, &l.spec, model, method)?;
            (
                json!({ "method": "exhaustive", "grouping": g.to_string(), "power": p }),
                None,
            )
        }
        CombineMethod::Random => {
            let g = combine_random(&l.data, seed.expect("seeded"))?;
            (json!({ "method": "random", "grouping": g.to_string() }), None)
        }
        CombineMethod::Loglinear => {
            let table = PairTable::paired(&l.data, &h.c, &l.spec, model, false)?;
            let psi = PsiMatrix::from_table(&table, h.delta);
            let (sol, warnings) = combine_loglinear(&psi)?;
            for w in &warnings {
                ctx.warn(w);
            }
            let k1 = combine_k1(&psi, opts)?;
            let result = json!({
                "method": "loglinear",
                "grouping": sol.grouping.to_string(),
                "objective": sol.objective,
                "bilp_grouping": k1.grouping.to_string(),
                "warnings": warnings,
            });
            (result, None)
        }
    };
    if let (Some(path), Some(csv)) = (a.diagnostics.as_deref(), diagnostics) {
        ctx.emit(Some(path), &csv)?;
    } else if a.diagnostics.is_some() {
        ctx.warn("this method writes no diagnostics");
    }
    ctx.emit_json(a.out.as_deref(), seed, &result)
}

fn cmd_power(a: PowerArgs, ctx: &mut Ctx<'_>) -> CliResult<()> {
    let seed = if needs_seed(&a.power) { Some(ctx.seed(a.power.seed)) } else { a.power.seed };
    let method = power_method(&a.power, seed.unwrap_or(0));
    let estimate = match (&a.data, &a.xi, &a.sigma) {
        (None, Some(xi), Some(sigma)) => {
            let lp = LimitParams::new(parse_reals(xi, "--xi")?, parse_reals(sigma, "--sigma")?)?;
            power_of_limits(&lp, a.delta, a.alpha, method)?
        }
        (Some(path), None, None) => {
            let da = DataArgs {
                data: path.clone(),
                formula: a.formula.clone(),
                outcome: a.outcome.clone(),
                cluster_col: a.cluster_col.clone(),
                time_col: a.time_col.clone(),
                no_time: a.no_time,
                controls: a.controls.clone(),
                treated: a.treated.clone(),
                treatment_col: a.treatment_col.clone(),
                delimiter: a.delimiter,
            };
            let l = load(&da, ctx)?;
            let c = a.c.as_deref().ok_or_else(|| usage("--c is required with --data"))?;
            let h = Hypothesis::new(parse_reals(c, "--c")?, 0.0, a.alpha, a.delta)?;
            let g = read_grouping(a.grouping.as_deref(), a.grouping_file.as_deref())?;
            let model = parse_model(a.model.as_deref(), &l.data)?;
            power_of_grouping(&l.data, &g, &h, &l.spec, model, method)?
        }
        _ => return Err(usage("give either --data or both --xi and --sigma")),
    };
    ctx.emit_json(a.out.as_deref(), seed, &estimate)
}

fn read_params(path: &Path) -> CliResult<CalibrationParams> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(Error::io(path, e)))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(Error::Schema(format!("{}: {e}", path.display()))))?;
    let inner = v.get("result").cloned().unwrap_or(v);
    serde_json::from_value(inner)
        .map_err(|e| CliError::Data(Error::Schema(format!("{}: {e}", path.display()))))
}

fn dgp_spec(dgp: u32, h: usize, beta: f64, burnin: Option<usize>) -> CliResult<DgpSpec> {
    let mut spec = DgpSpec::new(DgpVariant::from_number(dgp)?, h, beta)?;
    if let Some(b) = burnin {
        spec.init = ArInit::Burnin(b);
    }
    Ok(spec)
}

fn parse_policies(s: &str, grouping: Option<&str>) -> CliResult<Vec<Policy>> {
    s.split(',')
        .map(|p| match p.trim() {
            "crs_data" => Ok(Policy::CrsData),
            "crs_random" => Ok(Policy::CrsRandom),
            "all_omegas" => Ok(Policy::AllOmegas),
            "fixed" => {
                let g = grouping.ok_or_else(|| usage("policy `fixed` needs --grouping"))?;
                Ok(Policy::Fixed(Grouping::parse(g).map_err(|e| usage(e.to_string()))?))
            }
            other => Err(usage(format!("unknown policy `{other}`"))),
        })
        .collect()
}

fn curve_csv(out: &CurveOutput, header: &str) -> String {
    let mut s = header.to_string();
    s.push_str("dgp,h,beta,policy,rep_count,reject_rate,se\n");
    for r in &out.rows {
        s.push_str(&format!(
            "{},{},{:?},{},{},{:?},{:?}\n",
            r.dgp,
            r.h.map_or(String::new(), |h| h.to_string()),
            r.beta,
            r.policy,
            r.rep_count,
            r.reject_rate,
            r.se
        ));
    }
    s
}

fn omega_csv(out: &CurveOutput, header: &str) -> String {
    let mut s = header.to_string();
    s.push_str("omega,grouping");
    for e in &out.omega_rates {
        s.push_str(&format!(",beta={:?}", e.beta));
    }
    s.push('\n');
    for (o, g) in out.omegas.iter().enumerate() {
        s.push_str(&format!("{o},\"{g}\""));
        for e in &out.omega_rates {
            s.push_str(&format!(",{:?}", e.rates[o]));
        }
        s.push('\n');
    }
    for (name, pick) in [("min", true), ("max", false)] {
        s.push_str(&format!("envelope_{name},"));
        for e in &out.omega_rates {
            s.push_str(&format!(",{:?}", if pick { e.min } else { e.max }));
        }
        s.push('\n');
    }
    s
}

fn cmd_simulate(a: SimulateArgs, ctx: &mut Ctx<'_>) -> CliResult<()> {
    let grid = parse_grid(&a.betas)?;
    let policies = parse_policies(&a.policy, a.grouping.as_deref())?;
    if a.omega_out.is_some() && !policies.contains(&Policy::AllOmegas) {
        return Err(usage("--omega-out needs the all_omegas policy"));
    }
    let seed = ctx.seed(a.seed);
    let mut cfg = CurveConfig::new(policies, a.reps, a.alpha, seed);
    cfg.model = a.model.parse()?;
    cfg.k1.intervals = a.intervals;
    cfg.heuristic_reps = a.heuristic_reps;
    let out = match (a.dgp, &a.calibrated) {
        (Some(n), None) => {
            let spec = dgp_spec(n, a.h, 0.0, a.burnin)?;
            if let Some(m) = a.delta_magnitude {
                // Curves of the built-in designs use the default magnitude
                // unless overridden here.
                let exp = Experiment {
                    label: spec.variant.name().to_string(),
                    h: Some(spec.h),
                    grid: grid.clone(),
                    spec: crate::simulation::DGP_FORMULA.parse()?,
                    c: crate::simulation::DGP_C.to_vec(),
                    lambda: 0.0,
                    delta_magnitude: m,
                    generate: Box::new(|b, s| gen_dgp(&spec.with_beta(b), s)),
                };
                run_experiment(&exp, &cfg)?
            } else {
                rejection_curve(&spec, &grid, &cfg)?
            }
        }
        (None, Some(path)) => {
            let params = read_params(path)?;
            if a.target >= params.beta_hat.len() {
                return Err(usage(format!(
                    "--target {} out of range for {} covariates",
                    a.target,
                    params.beta_hat.len()
                )));
            }
            let formula = format!(
                "{} ~ {} + fe(cluster)",
                params.outcome,
                params.covariates.join(" + ")
            );
            let mut c = vec![0.0; params.beta_hat.len()];
            c[a.target] = 1.0;
            let q = params.cluster_ids.len();
            let magnitude = a
                .delta_magnitude
                .unwrap_or(2.0 * ((q * params.t) as f64).sqrt());
            let (target, nu_spec) = (a.target, a.nu_spec);
            let p = params.clone();
            let exp = Experiment {
                label: "calibrated".into(),
                h: None,
                grid: grid.clone(),
                spec: formula.parse()?,
                c,
                lambda: params.beta_hat[a.target],
                delta_magnitude: magnitude,
                generate: Box::new(move |shift, s| gen_calibrated(&p, target, shift, nu_spec, s)),
            };
            run_experiment(&exp, &cfg)?
        }
        _ => return Err(usage("give exactly one of --dgp and --calibrated")),
    };
    let header = ctx.csv_header(Some(seed));
    if let Some(p) = a.omega_out.as_deref() {
        ctx.emit(Some(p), &omega_csv(&out, &header))?;
    }
    ctx.emit(a.out.as_deref(), &curve_csv(&out, &header))
}

fn cmd_calibrate(a: CalibrateArgs, ctx: &mut Ctx<'_>) -> CliResult<()> {
    let l = load(&a.data, ctx)?;
    let params = calibrate(&l.data, &l.spec)?;
    ctx.emit_json(a.out.as_deref(), None, &params)
}

fn cmd_generate(a: GenerateArgs, ctx: &mut Ctx<'_>) -> CliResult<()> {
    let seed = ctx.seed(a.seed);
    let d = match (a.dgp, &a.calibrated) {
        (Some(n), None) => gen_dgp(&dgp_spec(n, a.h, a.beta, a.burnin)?, seed)?,
        (None, Some(path)) => {
            let p = read_params(path)?;
            gen_calibrated(&p, a.target, a.delta_shift, a.nu_spec, seed)?
        }
        _ => return Err(usage("give exactly one of --dgp and --calibrated")),
    };
    let ids = |s: &BTreeSet<ClusterId>| s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    let mut text = ctx.csv_header(Some(seed));
    text.push_str(&format!("# controls: {}\n# treated: {}\n", ids(d.controls()), ids(d.treated())));
    let mut body = Vec::new();
    write_panel_to(&d, &mut body)?;
    text.push_str(&String::from_utf8(body).expect("utf-8 csv"));
    ctx.emit(a.out.as_deref(), &text)
}
